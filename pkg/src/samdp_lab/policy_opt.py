"""PPO with Monte-Carlo returns and a GAIL-style discriminator trainer.

Both engines are shared by the attack and defense modules.  PPO follows the
plain form: returns are full discounted sums over complete episodes and the
advantage is ``return - V(s)``; there is no GAE.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffnet import (Categorical, DiagGaussian, GradientTape, Network, clip_tape,
                      kl_between_heads, log_sigmoid, make_optimizer, sigmoid)
from .errors import NumericalError, StructuralError

LOGIT_CLAMP = 20.0
METRIC_COLUMNS = ("iter", "mean_return", "surrogate", "value_loss", "disc_loss", "grad_norm",
                  "wall_time")


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    epochs_per_iter: int = 4
    minibatch_size: int = 256
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    discount: float = 0.99
    entropy_coef: float = 0.0
    iters: int = 50
    seed: int = 0
    steps_per_iter: int = 2048
    n_envs: int = 8
    hidden: tuple = (64, 64)
    optimizer: str = "sgd"  # "adam" behind a flag; plain ascent by default
    normalize_advantages: bool = True
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise StructuralError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.discount < 1.0:
            raise StructuralError("discount must lie in (0, 1)")
        for name in ("epochs_per_iter", "minibatch_size", "iters", "steps_per_iter", "n_envs"):
            if int(getattr(self, name)) < 1:
                raise StructuralError(f"{name} must be >= 1")
        if self.lr_policy <= 0 or self.lr_value <= 0:
            raise StructuralError("learning rates must be positive")
        if self.entropy_coef < 0:
            raise StructuralError("entropy_coef must be >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)


# ------------------------------------------------------------------ policies


class Policy:
    """A network plus an action head.

    ``kind`` is ``"discrete"`` (categorical over ``n_out`` logits, optionally
    masked) or ``"box"`` (diagonal Gaussian; the net emits mean and log-std).
    """

    def __init__(self, net: Network, kind: str):
        if kind not in ("discrete", "box"):
            raise StructuralError(f"unknown policy kind {kind!r}")
        if kind == "box" and net.layer_sizes[-1] % 2:
            raise StructuralError("a box policy needs an even output width")
        self.net, self.kind = net, kind

    @classmethod
    def build(cls, obs_dim: int, action_dim: int, kind: str, hidden=(64, 64),
              rng=None, activation: str = "tanh") -> "Policy":
        out = action_dim if kind == "discrete" else 2 * action_dim
        net = Network([obs_dim, *hidden, out], activation, rng, output_gain=0.01)
        return cls(net, kind)

    @property
    def obs_dim(self) -> int:
        return self.net.layer_sizes[0]

    def head_from_output(self, out: np.ndarray, mask=None):
        return Categorical(out, mask) if self.kind == "discrete" else DiagGaussian(out)

    def dist(self, obs, mask=None):
        return self.head_from_output(self.net(obs), mask)

    def dist_with_cache(self, obs, mask=None):
        out, cache = self.net.forward_with_cache(obs)
        return self.head_from_output(out, mask), cache

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False, mask=None):
        d = self.dist(obs, mask)
        return d.mode() if deterministic else d.sample(rng)

    def copy(self) -> "Policy":
        return Policy(self.net.copy(), self.kind)


def value_network(obs_dim: int, hidden=(64, 64), rng=None) -> Network:
    return Network([obs_dim, *hidden, 1], "tanh", rng, output_gain=1.0)


# ------------------------------------------------------------------ rollouts


@dataclass
class RolloutBatch:
    """Flat per-step arrays over complete episodes.

    ``end`` marks the last step of each episode; ``extras`` carries
    environment-specific per-step arrays (pairs for discriminators, flags).
    """

    obs: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    rewards: np.ndarray
    t: np.ndarray
    episode_id: np.ndarray
    end: np.ndarray
    masks: np.ndarray | None = None
    values: np.ndarray | None = None
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    extras: dict = field(default_factory=dict)
    episode_returns: np.ndarray | None = None
    discount: float = 0.99

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        if len(self) == 0:
            raise StructuralError("empty rollout batch")
        if self.advantages is not None and not np.all(np.isfinite(self.advantages)):
            raise NumericalError("non-finite advantages")
        for e in np.unique(self.episode_id):
            ts = self.t[self.episode_id == e]
            if not np.array_equal(ts, np.arange(len(ts))):
                raise StructuralError(f"episode {e} has non-consecutive time indices")


def discounted_returns(rewards: np.ndarray, end: np.ndarray, discount: float) -> np.ndarray:
    """R_t = r_t + gamma R_{t+1}, reset after every episode end."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if end[i]:
            acc = 0.0
        acc = rewards[i] + discount * acc
        out[i] = acc
    return out


def finalize_batch(batch: RolloutBatch, value_net: Network | None, discount: float,
                   rewards: np.ndarray | None = None) -> RolloutBatch:
    """(Re)compute returns, value estimates and advantages, optionally after
    substituting the per-step rewards (as adversarial imitation does)."""
    if rewards is not None:
        batch.rewards = np.asarray(rewards, dtype=float)
    batch.discount = discount
    batch.returns = discounted_returns(batch.rewards, batch.end, discount)
    batch.values = (value_net(batch.obs)[:, 0] if value_net is not None
                    else np.zeros(len(batch)))
    batch.advantages = batch.returns - batch.values
    ep_ret = {}
    for e, r in zip(batch.episode_id, batch.rewards):
        ep_ret[e] = ep_ret.get(e, 0.0) + r
    batch.episode_returns = np.array([ep_ret[e] for e in sorted(ep_ret)])
    batch.validate()
    return batch


def collect_rollouts(env, policy: Policy, n_steps: int, rng: np.random.Generator,
                     value_net: Network | None = None, discount: float = 0.99,
                     deterministic: bool = False) -> RolloutBatch:
    """Run the batched env until at least ``n_steps`` steps are recorded and
    every recorded episode has finished.

    Each env contributes whole episodes only; an env that finishes after the
    step target is reached stops recording.
    """
    if n_steps < 1:
        raise StructuralError("n_steps must be >= 1")
    n = env.n_envs
    obs = env.reset(rng)
    active = np.ones(n, dtype=bool)
    ep_of_env = np.arange(n)
    next_ep = n
    rec = {k: [] for k in ("obs", "act", "logp", "rew", "t", "ep", "end", "mask")}
    extras: dict = {}
    total = 0
    while active.any():
        mask = env.action_mask()
        d = policy.dist(obs, mask)
        a = d.mode() if deterministic else d.sample(rng)
        logp = d.log_prob(a)
        nobs, rew, end, info = env.step(a, rng)
        idx = np.flatnonzero(active)
        rec["obs"].append(obs[idx])
        rec["act"].append(np.asarray(a)[idx])
        rec["logp"].append(logp[idx])
        rec["rew"].append(np.asarray(rew, float)[idx])
        rec["t"].append(np.asarray(info["t"])[idx])
        rec["ep"].append(ep_of_env[idx])
        rec["end"].append(np.asarray(end)[idx])
        if mask is not None:
            rec["mask"].append(np.asarray(mask)[idx])
        for k, v in info.items():
            if k in ("t",):
                continue
            extras.setdefault(k, []).append(np.asarray(v)[idx])
        total += len(idx)
        for i in np.flatnonzero(end & active):
            if total >= n_steps:
                active[i] = False
            else:
                ep_of_env[i] = next_ep
                next_ep += 1
        obs = nobs
    # reorder so that each episode is contiguous and time-ordered
    ep = np.concatenate(rec["ep"])
    t = np.concatenate(rec["t"])
    order = np.lexsort((t, ep))
    _, dense = np.unique(ep[order], return_inverse=True)
    batch = RolloutBatch(
        obs=np.concatenate(rec["obs"])[order],
        actions=np.concatenate(rec["act"])[order],
        log_prob_old=np.concatenate(rec["logp"])[order],
        rewards=np.concatenate(rec["rew"])[order],
        t=t[order],
        episode_id=dense,
        end=np.concatenate(rec["end"])[order],
        masks=np.concatenate(rec["mask"])[order] if rec["mask"] else None,
        extras={k: np.concatenate(v)[order] for k, v in extras.items()},
    )
    return finalize_batch(batch, value_net, discount)


# ------------------------------------------------------------------ PPO update


Regularizer = Callable[[Policy, np.ndarray, np.ndarray, np.ndarray | None],
                       tuple[float, GradientTape]]


def surrogate_terms(ratio: np.ndarray, adv: np.ndarray, clip_eps: float):
    """Per-sample clipped surrogate and d(surrogate)/d(ratio)."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    value = np.minimum(unclipped, clipped)
    active = unclipped <= clipped  # the unclipped branch carries the gradient
    return value, np.where(active, adv, 0.0)


def policy_objective_grad(policy: Policy, obs, actions, logp_old, adv, clip_eps: float,
                          entropy_coef: float = 0.0, mask=None):
    """Mean clipped surrogate (+ entropy bonus) and its parameter gradient."""
    d, cache = policy.dist_with_cache(obs, mask)
    logp = d.log_prob(actions)
    ratio = np.exp(logp - logp_old)
    sur, dsur_dratio = surrogate_terms(ratio, adv, clip_eps)
    m = len(adv)
    if policy.kind == "discrete":
        g_out = (dsur_dratio * ratio)[:, None] * d.dlogp_dlogits(actions) / m
        ent = d.entropy()
        if entropy_coef:
            g_out = g_out + entropy_coef * d.dentropy_dlogits() / m
    else:
        g_out = (dsur_dratio * ratio)[:, None] * d.dlogp_doutput(actions) / m
        ent = d.entropy()
        if entropy_coef:
            g_out = g_out + entropy_coef * d.dentropy_doutput() / m
    tape = policy.net.backward(g_out, cache)
    objective = float(np.mean(sur) + entropy_coef * np.mean(ent))
    return objective, tape, logp


def value_loss_grad(value_net: Network, obs, returns):
    out, cache = value_net.forward_with_cache(obs)
    err = out[:, 0] - returns
    tape = value_net.backward((2.0 * err / len(err))[:, None], cache)
    return float(np.mean(err * err)), tape


@dataclass
class PpoOptimizers:
    policy: object
    value: object

    @classmethod
    def make(cls, policy: Policy, value_net: Network, cfg: PpoConfig) -> "PpoOptimizers":
        return cls(make_optimizer(policy.net, cfg.lr_policy, cfg.optimizer),
                   make_optimizer(value_net, cfg.lr_value, cfg.optimizer))


def ppo_update(policy: Policy, value_net: Network, batch: RolloutBatch, config: PpoConfig,
               regularizer: Regularizer | None = None, optimizers: PpoOptimizers | None = None,
               rng: np.random.Generator | None = None) -> dict:
    """K epochs of minibatch ascent on the clipped surrogate.

    ``regularizer(policy, obs, t, mask)`` returns ``(value, tape)`` for a
    penalty that is *subtracted* from the ascent objective.
    """
    if len(batch) == 0:
        raise StructuralError("ppo_update needs a nonempty batch")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    opt = optimizers or PpoOptimizers.make(policy, value_net, config)
    adv = batch.advantages.astype(float)
    if config.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    old_dist = policy.dist(batch.obs, batch.masks)
    n = len(batch)
    mb = min(config.minibatch_size, n)
    stats = {"surrogate": [], "value_loss": [], "reg": [], "grad_norm": []}
    for _ in range(config.epochs_per_iter):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            msk = None if batch.masks is None else batch.masks[idx]
            vl, vtape = value_loss_grad(value_net, batch.obs[idx], batch.returns[idx])
            vtape, _ = clip_tape(vtape, config.max_grad_norm)
            opt.value.step(vtape, ascend=False)
            obj, ptape, _ = policy_objective_grad(policy, batch.obs[idx], batch.actions[idx],
                                                  batch.log_prob_old[idx], adv[idx],
                                                  config.clip_eps, config.entropy_coef, msk)
            reg_val = 0.0
            if regularizer is not None:
                reg_val, rtape = regularizer(policy, batch.obs[idx], batch.t[idx], msk)
                ptape = ptape + rtape.scale(-1.0)
            if not np.isfinite(obj) or not np.isfinite(vl) or not np.isfinite(reg_val) \
                    or not np.isfinite(ptape.norm()):
                raise NumericalError(
                    f"non-finite PPO quantities: surrogate={obj}, value_loss={vl}, reg={reg_val}")
            ptape, gnorm = clip_tape(ptape, config.max_grad_norm)
            opt.policy.step(ptape, ascend=True)
            stats["surrogate"].append(obj)
            stats["value_loss"].append(vl)
            stats["reg"].append(reg_val)
            stats["grad_norm"].append(gnorm)
    new_dist = policy.dist(batch.obs, batch.masks)
    return {
        "surrogate": float(np.mean(stats["surrogate"])),
        "value_loss": float(np.mean(stats["value_loss"])),
        "reg": float(np.mean(stats["reg"])),
        "grad_norm": float(np.mean(stats["grad_norm"])),
        "kl_old_new": float(np.mean(kl_between_heads(old_dist, new_dist))),
    }


@dataclass
class TrainResult:
    policy: Policy
    value_net: Network
    metrics: list

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def ppo_train(env, config: PpoConfig, policy: Policy | None = None,
              regularizer: Regularizer | None = None, record_wall_time: bool = False,
              on_iter: Callable | None = None) -> TrainResult:
    """Plain PPO loop; ``on_iter(i, batch, stats)`` may add metric fields."""
    rng = np.random.default_rng(config.seed)
    if policy is None:
        policy = Policy.build(env.obs_dim, env.action_dim, env.action_kind, config.hidden, rng)
    value_net = value_network(env.obs_dim, config.hidden, rng)
    opt = PpoOptimizers.make(policy, value_net, config)
    t0 = time.perf_counter()
    rows = []
    for it in range(config.iters):
        batch = collect_rollouts(env, policy, config.steps_per_iter, rng, value_net, config.discount)
        stats = ppo_update(policy, value_net, batch, config, regularizer, opt, rng)
        row = {"iter": it, "mean_return": float(np.mean(batch.episode_returns)),
               "surrogate": stats["surrogate"], "value_loss": stats["value_loss"],
               "disc_loss": "", "grad_norm": stats["grad_norm"],
               "wall_time": time.perf_counter() - t0 if record_wall_time else 0.0}
        if on_iter is not None:
            row.update(on_iter(it, batch, stats) or {})
        rows.append(row)
    return TrainResult(policy, value_net, rows)


def metrics_to_csv(rows: list, columns: tuple | None = None) -> str:
    cols = list(columns or METRIC_COLUMNS)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ------------------------------------------------------------------ discriminator


def discriminator_network(in_dim: int, hidden=(64, 64), rng=None) -> Network:
    return Network([in_dim, *hidden, 1], "tanh", rng, output_gain=1.0)


def discriminator_prob(disc: Network, pairs) -> np.ndarray:
    """D(x) in (0, 1) from a logit head clamped to +-20."""
    z = np.clip(disc(pairs)[:, 0], -LOGIT_CLAMP, LOGIT_CLAMP)
    return sigmoid(z)


def discriminator_log_prob(disc: Network, pairs) -> np.ndarray:
    """log D(x), evaluated stably from the clamped logit."""
    z = np.clip(disc(pairs)[:, 0], -LOGIT_CLAMP, LOGIT_CLAMP)
    return log_sigmoid(z)


def discriminator_objective(disc: Network, agent_pairs, target_pairs,
                            agent_weights=None, target_weights=None):
    """E_agent[log D] + E_target[log(1 - D)] and its parameter gradient."""
    xa = np.atleast_2d(np.asarray(agent_pairs, float))
    xt = np.atleast_2d(np.asarray(target_pairs, float))
    wa = np.full(len(xa), 1.0 / len(xa)) if agent_weights is None else np.asarray(agent_weights, float)
    wt = np.full(len(xt), 1.0 / len(xt)) if target_weights is None else np.asarray(target_weights, float)
    x = np.concatenate([xa, xt])
    out, cache = disc.forward_with_cache(x)
    z_raw = out[:, 0]
    z = np.clip(z_raw, -LOGIT_CLAMP, LOGIT_CLAMP)
    inside = (np.abs(z_raw) < LOGIT_CLAMP).astype(float)
    na = len(xa)
    obj = float(np.sum(wa * log_sigmoid(z[:na])) + np.sum(wt * log_sigmoid(-z[na:])))
    # d log sigma(z)/dz = 1 - sigma(z);  d log sigma(-z)/dz = -sigma(z)
    g = np.concatenate([wa * (1.0 - sigmoid(z[:na])), -wt * sigmoid(z[na:])]) * inside
    tape = disc.backward(g[:, None], cache)
    return obj, tape


def train_discriminator(disc: Network, agent_pairs, target_pairs, lr: float = 1e-3,
                        steps: int = 100, optimizer=None, batch_size: int | None = None,
                        rng: np.random.Generator | None = None, agent_weights=None,
                        target_weights=None, kind: str = "adam") -> list:
    """Gradient ascent on the GAIL discriminator objective.

    Returns the loss curve as the binary cross-entropy (the negated
    objective).  Weighted inputs allow training against known densities.
    """
    xa = np.atleast_2d(np.asarray(agent_pairs, float))
    xt = np.atleast_2d(np.asarray(target_pairs, float))
    if len(xa) == 0 or len(xt) == 0:
        raise StructuralError("discriminator needs nonempty agent and target sets")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = optimizer or make_optimizer(disc, lr, kind)
    curve = []
    for _ in range(steps):
        if batch_size is not None and agent_weights is None and target_weights is None:
            ia = rng.integers(len(xa), size=min(batch_size, len(xa)))
            it = rng.integers(len(xt), size=min(batch_size, len(xt)))
            obj, tape = discriminator_objective(disc, xa[ia], xt[it])
        else:
            obj, tape = discriminator_objective(disc, xa, xt, agent_weights, target_weights)
        if not np.isfinite(obj):
            raise NumericalError("non-finite discriminator loss")
        opt.step(tape, ascend=True)
        curve.append(-obj)
    return curve
