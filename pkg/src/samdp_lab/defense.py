"""Time-discounted robust training and the uniform-smoothing baseline.

The regularizer is a gamma^t-weighted sum over batch states of the largest
KL(pi(.|s) || pi(.|s_hat)) over falsified states in the budget.  The clean
branch is held constant; gradients flow only through the perturbed output.
Setting ``time_discounted=False`` weights every state equally, which is the
smoothing baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffnet import GradientTape, dkl_dsecond, kl_between_heads, stop_gradient
from .envs import OFFSETS, GridWorld, make_vec_env
from .errors import StructuralError
from .mdp_core import DiscreteNeighbors, FiniteMdp
from .policy_opt import Policy, PpoConfig, TrainResult, ppo_train

DEFENSE_COLUMNS = ("iter", "clean_return", "reg_value", "inner_max_iters", "lambda")


@dataclass
class DefenseConfig:
    lambda_reg: float = 0.3
    discount_reg: float | None = None  # None: reuse the task discount
    inner_max: str = "pgd"  # "pgd" or "exhaustive"
    pgd_steps: int = 5
    pgd_step_frac: float | None = None  # step = frac * eps; None: 1 / pgd_steps
    epsilon: float = 0.3
    time_discounted: bool = True
    weight_floor: float = 1e-6
    episode_cap: int = 512
    reduction: str = "sum"  # "sum" over the minibatch, or "mean"
    seed_offset: int = 7919

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise StructuralError("lambda_reg must be >= 0")
        if self.pgd_steps < 1:
            raise StructuralError("pgd_steps must be >= 1")
        if self.inner_max not in ("pgd", "exhaustive"):
            raise StructuralError(f"unknown inner_max {self.inner_max!r}")
        if self.discount_reg is not None and not 0.0 < self.discount_reg < 1.0:
            raise StructuralError("discount_reg must lie in (0, 1)")
        if self.reduction not in ("sum", "mean"):
            raise StructuralError("reduction must be 'sum' or 'mean'")
        if self.epsilon < 0:
            raise StructuralError("epsilon must be >= 0")

    @property
    def step_size(self) -> float:
        frac = self.pgd_step_frac if self.pgd_step_frac is not None else 1.0 / self.pgd_steps
        return frac * self.epsilon


def time_weights(t, discount_reg: float, time_discounted: bool = True, floor: float = 1e-6,
                 cap: int = 512) -> np.ndarray:
    """gamma^t (or 1), with weights past the cap and below the floor zeroed."""
    t = np.asarray(t)
    if not time_discounted:
        return np.ones(len(t))
    w = discount_reg ** t.astype(float)
    return np.where((w < floor) & (t >= cap), 0.0, w) if cap is not None else w


# ------------------------------------------------------------------ candidate sets


def grid_candidates(world: GridWorld):
    """Adjacent-cell falsifications of each observed cell: (K, n, d) + mask."""
    def fn(obs):
        cells = world.decode(obs)
        mask = world.offset_mask(cells)
        cands = np.stack([world.encode(cells + np.asarray(off)) for off in OFFSETS])
        return cands, mask.T
    return fn


def tabular_candidates(budget: DiscreteNeighbors):
    n = len(budget)
    eye = np.eye(n)
    m = budget.mask()

    def fn(obs):
        s = np.argmax(np.atleast_2d(obs), axis=1)
        cands = np.stack([np.broadcast_to(eye[k], (len(s), n)) for k in range(n)])
        return cands, m[s].T
    return fn


# ------------------------------------------------------------------ inner maximization


def _kl_at(policy: Policy, clean_head, s_hat, mask=None) -> np.ndarray:
    return kl_between_heads(clean_head, policy.dist(s_hat, mask))


def inner_max_exhaustive(policy: Policy, obs, clean_head, candidates_fn, mask=None):
    """Exact max over a finite candidate set; returns (s_hat, kl)."""
    cands, valid = candidates_fn(obs)
    kls = np.stack([_kl_at(policy, clean_head, c, mask) for c in cands])
    kls = np.where(valid, kls, -np.inf)
    best = np.argmax(kls, axis=0)
    idx = np.arange(obs.shape[0])
    return cands[best, idx], kls[best, idx]


def inner_max_pgd(policy: Policy, obs, clean_head, eps: float, steps: int, step: float,
                  rng: np.random.Generator, mask=None):
    """Sign-gradient ascent on KL(clean || pi(s_hat)) inside the L-inf ball.

    Starts from a uniform point in the ball (the KL gradient vanishes at
    s_hat = s) and keeps the best iterate per state.
    """
    obs = np.atleast_2d(obs)
    if eps == 0:
        return obs.copy(), np.zeros(len(obs))
    s_hat = obs + rng.uniform(-eps, eps, size=obs.shape)
    best_x, best_kl = obs.copy(), np.zeros(len(obs))
    for _ in range(steps + 1):
        head, cache = policy.dist_with_cache(s_hat, mask)
        kl = kl_between_heads(clean_head, head)
        better = kl > best_kl
        best_x[better], best_kl[better] = s_hat[better], kl[better]
        if _ == steps:
            break
        g_in = policy.net.backward(dkl_dsecond(clean_head, head), cache).input
        s_hat = np.clip(s_hat + step * np.sign(g_in), obs - eps, obs + eps)
    return best_x, best_kl


# ------------------------------------------------------------------ regularizer


@dataclass
class RegularizerResult:
    value: float
    tape: GradientTape
    s_hat: np.ndarray
    kl: np.ndarray
    weights: np.ndarray
    inner_iters: int = 0
    extras: dict = field(default_factory=dict)


def tdrt_regularizer(policy: Policy, obs, t, cfg: DefenseConfig, discount: float = 0.99,
                     mask=None, rng: np.random.Generator | None = None, candidates_fn=None,
                     clean_head=None) -> RegularizerResult:
    """Weighted inner-maximized KL and its gradient through the perturbed branch.

    ``clean_head`` overrides the clean-branch distribution (it is treated as a
    constant either way); tests use it to hold the clean branch fixed while
    differencing the parameters of the perturbed branch.
    """
    if t is None:
        raise StructuralError("the regularizer needs the time index of every state")
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    t = np.asarray(t)
    if t.shape[0] != obs.shape[0]:
        raise StructuralError("time indices do not align with states")
    rng = rng if rng is not None else np.random.default_rng(0)
    if clean_head is None:
        out = stop_gradient(policy.net(obs))
        clean_head = policy.head_from_output(out, mask)
    g_reg = cfg.discount_reg if cfg.discount_reg is not None else discount
    w = time_weights(t, g_reg, cfg.time_discounted, cfg.weight_floor, cfg.episode_cap)
    if cfg.inner_max == "exhaustive":
        if candidates_fn is None:
            raise StructuralError("exhaustive inner max needs a candidate set")
        s_hat, kl = inner_max_exhaustive(policy, obs, clean_head, candidates_fn, mask)
        iters = 0
    else:
        s_hat, kl = inner_max_pgd(policy, obs, clean_head, cfg.epsilon, cfg.pgd_steps,
                                  cfg.step_size, rng, mask)
        iters = cfg.pgd_steps
    scale = 1.0 / len(obs) if cfg.reduction == "mean" else 1.0
    head, cache = policy.dist_with_cache(s_hat, mask)
    kl_at = kl_between_heads(clean_head, head)
    g_out = (scale * w)[:, None] * dkl_dsecond(clean_head, head)
    tape = policy.net.backward(g_out, cache)
    value = float(scale * np.sum(w * kl_at))
    return RegularizerResult(value, tape, s_hat, kl_at, w, iters)


def make_regularizer(cfg: DefenseConfig, discount: float, seed: int, candidates_fn=None,
                     log: list | None = None):
    """Callback for :func:`ppo_update`: returns (lambda * R, its gradient)."""
    rng = np.random.default_rng(seed + cfg.seed_offset)

    def reg(policy, obs, t, mask):
        r = tdrt_regularizer(policy, obs, t, cfg, discount, mask, rng, candidates_fn)
        if log is not None:
            log.append((r.value, r.inner_iters))
        return cfg.lambda_reg * r.value, r.tape.scale(cfg.lambda_reg)
    return reg


# ------------------------------------------------------------------ training


def candidates_for(world, cfg: DefenseConfig, budget=None):
    if cfg.inner_max != "exhaustive":
        return None
    if isinstance(world, GridWorld):
        return grid_candidates(world)
    if isinstance(world, FiniteMdp) and isinstance(budget, DiscreteNeighbors):
        return tabular_candidates(budget)
    raise StructuralError("exhaustive inner max needs a gridworld or a discrete budget")


def tdrt_train(world, ppo_cfg: PpoConfig, defense_cfg: DefenseConfig, seed: int | None = None,
               budget=None, record_wall_time: bool = False) -> TrainResult:
    """PPO whose ascent objective subtracts lambda * R_theta.

    With ``lambda_reg == 0`` the regularizer is skipped entirely, so the run
    is bit-identical to plain PPO with the same seed.
    """
    if seed is not None:
        ppo_cfg = PpoConfig(**{**ppo_cfg.__dict__, "seed": seed})
    env = make_vec_env(world, ppo_cfg.n_envs, "victim")
    log: list = []
    reg = None
    if defense_cfg.lambda_reg > 0:
        reg = make_regularizer(defense_cfg, ppo_cfg.discount, ppo_cfg.seed,
                               candidates_for(world, defense_cfg, budget), log)

    def on_iter(it, batch, stats):
        vals = [v for v, _ in log]
        iters = [k for _, k in log]
        log.clear()
        return {"clean_return": float(np.mean(batch.episode_returns)),
                "reg_value": float(np.mean(vals)) if vals else 0.0,
                "inner_max_iters": int(np.sum(iters)) if iters else 0,
                "lambda": defense_cfg.lambda_reg}

    return ppo_train(env, ppo_cfg, regularizer=reg, record_wall_time=record_wall_time,
                     on_iter=on_iter)


def defense_metrics(result: TrainResult) -> list:
    return [{k: r[k] for k in DEFENSE_COLUMNS} for r in result.metrics]


# ------------------------------------------------------------------ adversary gain


def adversary_gain(victim, world, artifact, r_tgt=None, n_episodes: int = 200, seed: int = 0,
                   discount: float = 1.0, horizon: int | None = None) -> tuple[float, float]:
    """Monte-Carlo E_{pi o nu}[R_tgt] - E_pi[R_tgt] with paired seeds.

    ``r_tgt(obs, info)`` returns the per-step target reward (default: the
    adversary-task reward).  Returns (gain, standard error).
    """
    from .attacks import IdentityAdversary

    adv = artifact.adversary if artifact is not None else IdentityAdversary()

    def episode(adversary, rng):
        env = make_vec_env(world, 1, "victim")
        if horizon is not None and hasattr(env, "horizon"):
            env.horizon = horizon
        obs = env.reset(rng)
        total, k = 0.0, 0
        while True:
            s_hat = obs if adversary is None else adversary.perturb(obs, rng)
            a = victim._drive(s_hat, rng)
            nobs, _, end, info = env.step(a, rng)
            r = (info["reward_adversary"] if r_tgt is None else r_tgt(obs, info))
            total += discount**k * float(np.asarray(r).reshape(-1)[0])
            k += 1
            obs = nobs
            if end[0]:
                return total

    diffs = np.array([episode(adv, np.random.default_rng([seed, i]))
                      - episode(None, np.random.default_rng([seed, i])) for i in range(n_episodes)])
    se = float(diffs.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(diffs.mean()), se
