"""Observation attacks against a frozen victim.

Access to the victim goes through tiered handles.  Every falsified state
passes through :func:`apply_budget` before the victim sees it.  Attack kinds:

* ``bia_ilfd`` / ``bia_ilfo``: adversarial imitation of target demonstrations,
  with a discriminator over (s, a) or (s, s') pairs;
* ``reward_max``: PPO on the adversary's own task reward;
* ``targeted_pgd``: per-step white-box sign-gradient search;
* ``random``: uniform noise in the L-inf ball;
* ``optimal_tabular``: exact solve of the induced attack MDP on the gridworld.
"""
from __future__ import annotations

import enum
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .diffnet import categorical_head, load_checkpoint, make_optimizer, save_checkpoint
from .envs import OFFSETS, GridWorld, PointMass, gridworld_tabular, make_vec_env
from .errors import BudgetError, InterfaceError, StructuralError
from .exact_oracle import build_attack_mdp, optimal_policy
from .mdp_core import (DiscreteNeighbors, FiniteMdp, LinfBall, TabularAdversary,
                       TabularPolicy, project_to_budget)
from .policy_opt import (Policy, PpoConfig, PpoOptimizers, collect_rollouts, discriminator_log_prob,
                         discriminator_network, finalize_batch, ppo_update, train_discriminator,
                         value_network)

ATTACK_KINDS = ("bia_ilfd", "bia_ilfo", "targeted_pgd", "random", "reward_max", "optimal_tabular")


# ------------------------------------------------------------------ access tiers


class AccessTier(enum.Enum):
    WHITE_BOX = "white_box"
    BLACK_BOX = "black_box"
    NO_BOX = "no_box"


_RANK = {AccessTier.NO_BOX: 0, AccessTier.BLACK_BOX: 1, AccessTier.WHITE_BOX: 2}


class _TabularModel:
    """Adapter so a TabularPolicy acts on one-hot observations."""

    kind = "discrete"

    def __init__(self, pi: TabularPolicy):
        self.pi = pi

    def probs(self, obs) -> np.ndarray:
        return self.pi.probs[np.argmax(np.atleast_2d(obs), axis=1)]

    def act(self, obs, rng, deterministic: bool = False):
        p = self.probs(obs)
        if deterministic:
            return np.argmax(p, axis=1)
        c = np.cumsum(p, axis=1)
        return np.minimum((rng.random(len(p))[:, None] >= c).sum(axis=1), p.shape[1] - 1)


class VictimHandle:
    """Frozen victim behind an access tier.

    The environment side drives the victim through :meth:`_drive`; attack code
    may call :meth:`query` (black box and above) and :meth:`action_loss_grad`
    (white box only).  The policy object itself is not exposed.
    """

    def __init__(self, model, tier: AccessTier | str, deterministic: bool = False):
        self._model = _TabularModel(model) if isinstance(model, TabularPolicy) else model
        self.tier = AccessTier(tier)
        self._deterministic = deterministic

    @property
    def action_kind(self) -> str:
        return self._model.kind

    def _require(self, tier: AccessTier, what: str) -> None:
        if _RANK[self.tier] < _RANK[tier]:
            raise InterfaceError(f"{what} needs {tier.value} access; handle is {self.tier.value}")

    def _drive(self, obs, rng):
        """Environment-side action selection (the victim acting in the world)."""
        return self._model.act(obs, rng, deterministic=self._deterministic)

    def query(self, obs, rng):
        """Observe the victim's action on ``obs``."""
        self._require(AccessTier.BLACK_BOX, "reading victim actions")
        return self._drive(obs, rng)

    def action_loss_grad(self, s_hat, a_target):
        """Squared distance between the victim's action output at ``s_hat`` and
        ``a_target`` plus its gradient w.r.t. ``s_hat``.

        Discrete victims compare action probabilities with a one-hot target;
        continuous victims compare the mean action.
        """
        self._require(AccessTier.WHITE_BOX, "input gradients")
        m = self._model
        if hasattr(m, "action_loss_grad"):
            return m.action_loss_grad(s_hat, a_target)
        out, cache = m.net.forward_with_cache(s_hat)
        if m.kind == "discrete":
            p = categorical_head(out)
            y = np.zeros_like(p)
            y[np.arange(len(p)), np.asarray(a_target, dtype=int).reshape(-1)] = 1.0
            diff = p - y
            g_p = 2.0 * diff
            g_out = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
        else:
            k = out.shape[1] // 2
            diff = out[:, :k] - np.atleast_2d(a_target)
            g_out = np.concatenate([2.0 * diff, np.zeros_like(diff)], axis=1)
        loss = np.sum(diff * diff, axis=1)
        return loss, m.net.backward(g_out, cache).input


def make_victim(model, tier="black_box", deterministic: bool = False) -> VictimHandle:
    return VictimHandle(model, tier, deterministic)


# ------------------------------------------------------------------ budget


def apply_budget(s, s_hat, budget) -> np.ndarray:
    """Project falsified states into the budget (L-inf clamp)."""
    if isinstance(budget, LinfBall):
        return project_to_budget(s, s_hat, budget.epsilon)
    raise StructuralError("apply_budget handles vector states; discrete budgets are index masks")


def check_budget(s, s_hat, budget, tol: float = 1e-12) -> None:
    s, s_hat = np.atleast_2d(s), np.atleast_2d(s_hat)
    if isinstance(budget, LinfBall):
        if np.any(np.max(np.abs(s_hat - s), axis=1) > budget.epsilon + tol):
            raise BudgetError("falsified state outside the L-inf ball")
        return
    mask = budget.mask()
    si, hi = np.argmax(s, axis=1), np.argmax(s_hat, axis=1)
    if not np.all(mask[si, hi]):
        raise BudgetError("falsified state outside B(s)")


# ------------------------------------------------------------------ adversaries


class Adversary:
    """Maps a batch of true observations to falsified observations."""

    def perturb(self, obs, rng, t=None) -> np.ndarray:
        raise NotImplementedError


class IdentityAdversary(Adversary):
    def perturb(self, obs, rng, t=None):
        return np.array(obs, dtype=float, copy=True)


class RandomAdversary(Adversary):
    def __init__(self, epsilon: float):
        self.epsilon = float(epsilon)

    def perturb(self, obs, rng, t=None):
        return random_attack(obs, self.epsilon, rng)


def random_attack(s, budget_eps: float, rng: np.random.Generator) -> np.ndarray:
    """s + Uniform([-eps, eps]^d)."""
    s = np.asarray(s, dtype=float)
    if budget_eps == 0:
        return s.copy()
    return s + rng.uniform(-budget_eps, budget_eps, size=s.shape)


class PolicyAdversary(Adversary):
    """A learned adversary.

    ``mode="offset"``: categorical over the nine Chebyshev-1 cell offsets of a
    gridworld (wall cells masked).  ``mode="box"``: s_hat = s + eps tanh(u).
    ``mode="index"``: categorical over tabular states masked by B(s).
    """

    def __init__(self, policy: Policy, mode: str, budget, world=None,
                 deterministic: bool = False):
        if mode not in ("offset", "box", "index"):
            raise StructuralError(f"unknown adversary mode {mode!r}")
        self.policy, self.mode, self.budget, self.world = policy, mode, budget, world
        self.deterministic = deterministic

    def action_mask(self, obs):
        if self.mode == "offset":
            return self.world.offset_mask(self.world.decode(obs))
        if self.mode == "index":
            return self.budget.mask()[np.argmax(np.atleast_2d(obs), axis=1)]
        return None

    def from_actions(self, obs, actions) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.mode == "offset":
            cells = self.world.decode(obs) + np.asarray(OFFSETS)[np.asarray(actions, dtype=int)]
            return apply_budget(obs, self.world.encode(cells), self.budget)
        if self.mode == "box":
            eps = self.budget.epsilon
            return apply_budget(obs, obs + eps * np.tanh(np.atleast_2d(actions)), self.budget)
        return np.eye(obs.shape[1])[np.asarray(actions, dtype=int)]

    def perturb(self, obs, rng, t=None):
        obs = np.atleast_2d(obs)
        a = self.policy.act(obs, rng, self.deterministic, self.action_mask(obs))
        return self.from_actions(obs, a)


class TabularGridAdversary(Adversary):
    """Deterministic cell map ``nu[i] = j`` on the gridworld's free cells."""

    def __init__(self, world: GridWorld, nu: TabularAdversary, cells: list):
        self.world, self.nu, self.cells = world, nu, cells
        self.index = {c: i for i, c in enumerate(cells)}
        self._map = nu.as_map()

    def perturb(self, obs, rng, t=None):
        obs = np.atleast_2d(obs)
        cells = self.world.decode(obs)
        out = np.array([self.cells[self._map[self.index[tuple(c)]]] for c in cells])
        return apply_budget(obs, self.world.encode(out), LinfBall(self.world.cell_size))


class TargetedPgdAdversary(Adversary):
    def __init__(self, victim: VictimHandle, target: Policy, epsilon: float, steps: int = 30,
                 deterministic_target: bool = False):
        victim._require(AccessTier.WHITE_BOX, "targeted PGD")
        self.victim, self.target, self.epsilon, self.steps = victim, target, epsilon, steps
        self.deterministic_target = deterministic_target

    def perturb(self, obs, rng, t=None):
        return targeted_pgd_step(self.victim, self.target, obs, self.epsilon, self.steps, rng,
                                 self.deterministic_target)


def targeted_pgd_step(victim: VictimHandle, target_policy, s, budget_eps: float, T: int = 30,
                      rng: np.random.Generator | None = None,
                      deterministic_target: bool = False) -> np.ndarray:
    """T sign-gradient steps of size eps/T on ||a(s_hat) - a_tgt||^2.

    ``a_tgt`` is drawn once from the target policy at the clean state; the
    search starts from a uniform point within eps/T of ``s``.
    """
    victim._require(AccessTier.WHITE_BOX, "targeted PGD")
    if T < 1:
        raise StructuralError("T must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if budget_eps == 0:
        return s.copy()
    a_tgt = target_policy.act(s, rng, deterministic_target)
    step = budget_eps / T
    s_hat = s + rng.uniform(-step, step, size=s.shape)
    for _ in range(T):
        _, g = victim.action_loss_grad(s_hat, a_tgt)
        s_hat = np.clip(s_hat - np.sign(g) * step, s - budget_eps, s + budget_eps)
    return s_hat


# ------------------------------------------------------------------ attack environment


class AttackEnv:
    """The attack MDP realized by simulation: the adversary acts, the frozen
    victim responds to the falsified observation, the world steps on the true
    state.  Victim actions appear in ``info`` only above the no-box tier.
    """

    def __init__(self, world, victim: VictimHandle, budget, n_envs: int = 8,
                 task: str = "adversary", reward_fn=None):
        self.world, self.victim, self.budget = world, victim, budget
        self.base = make_vec_env(world, n_envs, task)
        self.n_envs = n_envs
        self.reward_fn = reward_fn
        self.obs_dim = self.base.obs_dim
        if isinstance(world, GridWorld):
            self.mode, self.action_kind, self.action_dim = "offset", "discrete", len(OFFSETS)
        elif isinstance(world, FiniteMdp):
            self.mode, self.action_kind, self.action_dim = "index", "discrete", world.n_states
        else:
            self.mode, self.action_kind, self.action_dim = "box", "box", self.base.obs_dim
        self._shim = PolicyAdversary(None, self.mode, budget, world if self.mode == "offset" else None)

    def reset(self, rng):
        return self.base.reset(rng)

    def action_mask(self):
        return self._shim.action_mask(self.base.observe())

    def step(self, actions, rng):
        obs = self.base.observe()
        s_hat = self._shim.from_actions(obs, actions)
        a = self.victim._drive(s_hat, rng)
        nobs, rew, end, info = self.base.step(a, rng)
        if self.reward_fn is not None:
            rew = np.asarray(self.reward_fn(obs, info), dtype=float)
        info = dict(info)
        info["s_hat"] = s_hat
        if self.victim.tier != AccessTier.NO_BOX:
            info["victim_action"] = np.asarray(a)
        return nobs, rew, end, info


# ------------------------------------------------------------------ artifacts


@dataclass
class AttackArtifact:
    kind: str
    adversary: Adversary
    budget: object
    metadata: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise StructuralError(f"unknown attack kind {self.kind!r}")

    def to_dict(self) -> dict:
        adv = self.adversary
        doc = {"kind": self.kind, "metadata": self.metadata, "budget": _budget_dict(self.budget)}
        if isinstance(adv, PolicyAdversary):
            doc["adversary"] = {"type": "policy", "mode": adv.mode, "policy_kind": adv.policy.kind,
                                "deterministic": adv.deterministic,
                                "checkpoint": json.loads(save_checkpoint(adv.policy.net))}
        elif isinstance(adv, TabularGridAdversary):
            doc["adversary"] = {"type": "tabular_grid", "map": adv._map.tolist(),
                                "cells": [list(c) for c in adv.cells]}
        elif isinstance(adv, RandomAdversary):
            doc["adversary"] = {"type": "random", "epsilon": adv.epsilon}
        elif isinstance(adv, TargetedPgdAdversary):
            doc["adversary"] = {"type": "targeted_pgd", "epsilon": adv.epsilon, "steps": adv.steps,
                                "target_kind": adv.target.kind,
                                "target": json.loads(save_checkpoint(adv.target.net))}
        else:
            doc["adversary"] = {"type": "identity"}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict, world=None, victim: VictimHandle | None = None) -> "AttackArtifact":
        budget = _budget_from_dict(doc["budget"])
        a = doc["adversary"]
        if a["type"] == "policy":
            net = load_checkpoint(json.dumps(a["checkpoint"]))
            adv = PolicyAdversary(Policy(net, a["policy_kind"]), a["mode"], budget, world,
                                  a.get("deterministic", False))
        elif a["type"] == "tabular_grid":
            cells = [tuple(c) for c in a["cells"]]
            adv = TabularGridAdversary(world, TabularAdversary.from_map(a["map"]), cells)
        elif a["type"] == "random":
            adv = RandomAdversary(a["epsilon"])
        elif a["type"] == "targeted_pgd":
            if victim is None:
                raise InterfaceError("a targeted PGD artifact needs a white-box victim handle")
            target = Policy(load_checkpoint(json.dumps(a["target"])), a["target_kind"])
            adv = TargetedPgdAdversary(victim, target, a["epsilon"], a["steps"])
        else:
            adv = IdentityAdversary()
        return cls(doc["kind"], adv, budget, doc.get("metadata", {}))


def _budget_dict(b) -> dict:
    if isinstance(b, LinfBall):
        return {"type": "linf", "epsilon": b.epsilon}
    return {"type": "neighbors", "neighbors": [list(r) for r in b.neighbors]}


def _budget_from_dict(d: dict):
    if d["type"] == "linf":
        return LinfBall(d["epsilon"])
    return DiscreteNeighbors(tuple(tuple(r) for r in d["neighbors"]))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ learned attacks


@dataclass
class DiscConfig:
    lr: float = 1e-3
    steps_per_iter: int = 10
    batch_size: int = 256
    hidden: tuple = (64, 64)
    optimizer: str = "adam"
    absorbing: bool = True  # terminated episodes continue in a scored absorbing pair


def action_features(actions, action_kind: str, action_dim: int) -> np.ndarray:
    if action_kind == "discrete":
        return np.eye(action_dim)[np.asarray(actions, dtype=int).reshape(-1)]
    return np.atleast_2d(np.asarray(actions, dtype=float))


def _victim_action_dim(world) -> int:
    if isinstance(world, GridWorld):
        return 4
    if isinstance(world, PointMass):
        return 2
    return world.n_actions


def _adversary_policy(env: AttackEnv, cfg: PpoConfig, rng, init: str) -> Policy:
    pol = Policy.build(env.obs_dim, env.action_dim, env.action_kind, cfg.hidden, rng)
    if init == "identity":
        if env.mode == "offset":
            pol.net.biases[-1][OFFSETS.index((0, 0))] = 5.0
        elif env.mode == "box":
            pol.net.biases[-1][env.action_dim:] = -5.0  # near-zero offset, tiny spread
        else:
            raise StructuralError("identity init is defined for offset and box adversaries")
    elif init != "uniform":
        raise StructuralError(f"unknown adversary init {init!r}")
    return pol


def _terminal_obs(world, obs) -> np.ndarray:
    """Whether each observation lies in a goal (episode-ending) state."""
    obs = np.atleast_2d(obs)
    if isinstance(world, GridWorld):
        cells = [tuple(c) for c in world.decode(obs)]
        return np.array([c in (world.goal_victim, world.goal_adversary) for c in cells])
    if isinstance(world, PointMass):
        return world.reached(obs, "victim") | world.reached(obs, "adversary")
    return np.zeros(len(obs), dtype=bool)


def _with_flag(pairs: np.ndarray, n_absorbing: int, absorbing: bool) -> np.ndarray:
    """Append an absorbing-indicator column and ``n_absorbing`` absorbing rows."""
    if not absorbing:
        return pairs
    real = np.concatenate([pairs, np.zeros((len(pairs), 1))], axis=1)
    absorb = np.zeros((n_absorbing, pairs.shape[1] + 1))
    absorb[:, -1] = 1.0
    return np.concatenate([real, absorb], axis=0)


def absorbing_pair(dim: int) -> np.ndarray:
    a = np.zeros((1, dim + 1))
    a[0, -1] = 1.0
    return a


def _demo_pairs(demos, mode: str, world, absorbing: bool = False) -> np.ndarray:
    if mode == "ilfd":
        kind = "discrete" if not isinstance(world, PointMass) else "box"
        pairs = demos.state_action_pairs(
            lambda a: action_features([a], kind, _victim_action_dim(world))[0])
    else:
        pairs = demos.state_pairs()
    last = [ep.steps[-1].next_state for ep in demos.episodes]
    return _with_flag(pairs, int(_terminal_obs(world, last).sum()), absorbing)


def _agent_pairs(batch, mode: str, world, absorbing: bool = False) -> np.ndarray:
    if mode == "ilfd":
        kind = "discrete" if not isinstance(world, PointMass) else "box"
        feats = action_features(batch.extras["victim_action"], kind, _victim_action_dim(world))
        pairs = np.concatenate([batch.obs, feats], axis=1)
    else:
        pairs = np.concatenate([batch.obs, batch.extras["next_obs"]], axis=1)
    return _with_flag(pairs, int(_terminated(batch).sum()), absorbing)


def _terminated(batch) -> np.ndarray:
    """Steps that end an episode by reaching a goal (not by the time limit)."""
    trunc = np.asarray(batch.extras.get("truncated", np.zeros(len(batch), bool)), dtype=bool)
    return batch.end & ~trunc


def bia_train(victim: VictimHandle, world, demos, budget, ppo_cfg: PpoConfig,
              disc_cfg: DiscConfig | None = None, mode: str = "ilfd", init: str = "uniform",
              record_wall_time: bool = False) -> AttackArtifact:
    """Behavior imitation attack: GAIL over the attack MDP.

    Each iteration rolls out the adversary through the victim, trains the
    discriminator on agent-vs-demonstration pairs, then takes a PPO step with
    per-step reward ``-log D(pair)`` from the updated discriminator.
    """
    if mode not in ("ilfd", "ilfo"):
        raise StructuralError(f"unknown BIA mode {mode!r}")
    if mode == "ilfd":
        victim._require(AccessTier.BLACK_BOX, "ILfD imitation")
        if not demos.actions_present:
            raise StructuralError("ILfD needs demonstrations with actions")
    elif demos.actions_present:
        raise StructuralError("ILfO needs action-free demonstrations")
    disc_cfg = disc_cfg or DiscConfig()
    rng = np.random.default_rng(ppo_cfg.seed)
    env = AttackEnv(world, victim, budget, ppo_cfg.n_envs)
    policy = _adversary_policy(env, ppo_cfg, rng, init)
    value_net = value_network(env.obs_dim, ppo_cfg.hidden, rng)
    opt = PpoOptimizers.make(policy, value_net, ppo_cfg)
    target = _demo_pairs(demos, mode, world, disc_cfg.absorbing)
    disc = discriminator_network(target.shape[1], disc_cfg.hidden, rng)
    dopt = make_optimizer(disc, disc_cfg.lr, disc_cfg.optimizer)
    rows = []
    t0 = time.perf_counter()
    for it in range(ppo_cfg.iters):
        batch = collect_rollouts(env, policy, ppo_cfg.steps_per_iter, rng, value_net, ppo_cfg.discount)
        if mode == "ilfo" and "victim_action" in batch.extras:
            del batch.extras["victim_action"]  # no-box discipline even on richer handles
        agent = _agent_pairs(batch, mode, world, disc_cfg.absorbing)
        curve = train_discriminator(disc, agent, target, disc_cfg.lr, disc_cfg.steps_per_iter,
                                    dopt, disc_cfg.batch_size, rng)
        raw = bia_reward(disc, agent[: len(batch)])
        rewards = raw
        if disc_cfg.absorbing:
            # the absorbing pair repeats forever after a goal is reached
            r_abs = float(bia_reward(disc, absorbing_pair(agent.shape[1] - 1))[0])
            g = ppo_cfg.discount
            rewards = raw + _terminated(batch) * (g * r_abs / (1.0 - g))
        env_return = float(np.mean(batch.episode_returns))
        success = float(np.mean(batch.extras["adversary_success"][batch.end]))
        finalize_batch(batch, value_net, ppo_cfg.discount, rewards)
        stats = ppo_update(policy, value_net, batch, ppo_cfg, None, opt, rng)
        rows.append({"iter": it, "mean_return": env_return, "surrogate": stats["surrogate"],
                     "value_loss": stats["value_loss"], "disc_loss": curve[-1],
                     "grad_norm": stats["grad_norm"],
                     "wall_time": time.perf_counter() - t0 if record_wall_time else 0.0,
                     "imitation_reward": float(np.mean(raw)), "success": success})
    adv = PolicyAdversary(policy, env.mode, budget, world if env.mode == "offset" else None)
    meta = {"seed": ppo_cfg.seed, "mode": mode, "tier": victim.tier.value,
            "n_demo_episodes": len(demos.episodes), "config_hash": config_hash(
                {"ppo": ppo_cfg.__dict__, "disc": disc_cfg.__dict__, "mode": mode, "init": init})}
    art = AttackArtifact("bia_" + mode, adv, budget, meta, rows)
    art.discriminator = disc
    return art


def bia_reward(disc, pairs) -> np.ndarray:
    """Per-step imitation reward -log D(pair)."""
    return -discriminator_log_prob(disc, pairs)


def reward_max_train(victim: VictimHandle, world, budget, ppo_cfg: PpoConfig, r_adv=None,
                     init: str = "uniform", record_wall_time: bool = False) -> AttackArtifact:
    """PPO on the attack MDP with the adversary's task reward.

    ``r_adv(obs, info)`` overrides the environment's adversary-task reward; it
    sees only transitions, so a no-box handle suffices.
    """
    rng = np.random.default_rng(ppo_cfg.seed)
    env = AttackEnv(world, victim, budget, ppo_cfg.n_envs, reward_fn=r_adv)
    policy = _adversary_policy(env, ppo_cfg, rng, init)
    value_net = value_network(env.obs_dim, ppo_cfg.hidden, rng)
    opt = PpoOptimizers.make(policy, value_net, ppo_cfg)
    rows = []
    t0 = time.perf_counter()
    for it in range(ppo_cfg.iters):
        batch = collect_rollouts(env, policy, ppo_cfg.steps_per_iter, rng, value_net, ppo_cfg.discount)
        stats = ppo_update(policy, value_net, batch, ppo_cfg, None, opt, rng)
        rows.append({"iter": it, "mean_return": float(np.mean(batch.episode_returns)),
                     "surrogate": stats["surrogate"], "value_loss": stats["value_loss"],
                     "disc_loss": "", "grad_norm": stats["grad_norm"],
                     "wall_time": time.perf_counter() - t0 if record_wall_time else 0.0,
                     "success": float(np.mean(batch.extras["adversary_success"][batch.end]))})
    adv = PolicyAdversary(policy, env.mode, budget, world if env.mode == "offset" else None)
    meta = {"seed": ppo_cfg.seed, "tier": victim.tier.value,
            "config_hash": config_hash({"ppo": ppo_cfg.__dict__, "init": init})}
    return AttackArtifact("reward_max", adv, budget, meta, rows)


# ------------------------------------------------------------------ exact attack


def tabulate_victim(world: GridWorld, victim_model, deterministic: bool = False) -> TabularPolicy:
    """The victim's action probabilities at every free cell (one-hot argmax
    when the victim acts greedily)."""
    cells = world.free_cells
    if isinstance(victim_model, Policy):
        p = victim_model.dist(world.encode(cells)).probs
        if deterministic:
            p = np.eye(p.shape[1])[np.argmax(p, axis=1)]
        return TabularPolicy(p)
    raise StructuralError("tabulation needs a parametric policy")


def optimal_tabular_attack(world: GridWorld, victim_model, discount: float = 0.99,
                           deterministic: bool = False) -> AttackArtifact:
    """Solve the attack MDP exactly over adjacent-cell falsifications.

    White-box by construction (reads the victim's full action table); it is
    the strongest attack available on the gridworld and serves as the
    reference for defense evaluation.
    """
    samdp, cells, index = gridworld_tabular(world, discount, task="adversary")
    pi = tabulate_victim(world, victim_model, deterministic)
    am = build_attack_mdp(samdp, pi, penalty_C=0.0)
    nu, _ = optimal_policy(am.as_finite_mdp(), action_mask=samdp.perturbation.mask())
    adv = TabularGridAdversary(world, TabularAdversary.from_map(nu), cells)
    return AttackArtifact("optimal_tabular", adv, LinfBall(world.cell_size),
                          {"discount": discount, "deterministic_victim": deterministic})


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    kind: str
    n_episodes: int
    attack_reward_mean: float
    attack_reward_std: float
    clean_reward_mean: float
    clean_reward_std: float
    success_rate: float
    clean_success_rate: float
    attacked_victim_reward_mean: float
    clean_attack_reward_mean: float
    tv_to_target: float | None = None

    COLUMNS = ("kind", "n_episodes", "attack_reward_mean", "attack_reward_std",
               "clean_reward_mean", "clean_reward_std", "success_rate", "clean_success_rate",
               "attacked_victim_reward_mean", "clean_attack_reward_mean", "tv_to_target")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}


def _state_key(world, obs) -> tuple:
    if isinstance(world, GridWorld):
        return tuple(int(v) for v in world.decode(obs))
    if isinstance(world, FiniteMdp):
        return (int(np.argmax(obs)),)
    pos = np.clip(np.asarray(obs)[:2], -1.0, 1.0 - 1e-9)
    return tuple(int(v) for v in np.floor((pos + 1.0) * 5.0))  # 10x10 position bins


def run_episode(world, victim: VictimHandle, adversary: Adversary | None, rng) -> dict:
    env = make_vec_env(world, 1, "victim")
    obs = env.reset(rng)
    out = {"victim": 0.0, "adversary": 0.0, "success": False, "visits": [], "s_hat": [],
           "obs": []}
    while True:
        s_hat = obs if adversary is None else adversary.perturb(obs, rng)
        a = victim._drive(s_hat, rng)
        out["visits"].append(_state_key(world, obs[0]))
        out["obs"].append(obs[0].copy())
        out["s_hat"].append(np.atleast_2d(s_hat)[0].copy())
        obs, _, end, info = env.step(a, rng)
        out["victim"] += float(info["reward_victim"][0])
        out["adversary"] += float(info["reward_adversary"][0])
        if end[0]:
            out["success"] = bool(info["adversary_success"][0])
            return out


def _hist(keys) -> dict:
    h: dict = {}
    for k in keys:
        h[k] = h.get(k, 0) + 1
    n = max(len(keys), 1)
    return {k: v / n for k, v in h.items()}


def visitation_tv(keys_a, keys_b) -> float:
    ha, hb = _hist(keys_a), _hist(keys_b)
    return 0.5 * sum(abs(ha.get(k, 0.0) - hb.get(k, 0.0)) for k in set(ha) | set(hb))


def evaluate_attack(victim: VictimHandle, world, artifact: AttackArtifact | None,
                    n_episodes: int = 50, seed: int = 0, target_keys=None) -> EvalReport:
    """Paired clean and attacked rollouts; episode k uses seed (seed, k) in both."""
    if n_episodes < 1:
        raise StructuralError("n_episodes must be >= 1")
    adv = artifact.adversary if artifact is not None else IdentityAdversary()
    clean, attacked = [], []
    for k in range(n_episodes):
        clean.append(run_episode(world, victim, None, np.random.default_rng([seed, k])))
        attacked.append(run_episode(world, victim, adv, np.random.default_rng([seed, k])))
    ar = np.array([e["adversary"] for e in attacked])
    cr = np.array([e["victim"] for e in clean])
    tv = None
    if target_keys is not None:
        tv = visitation_tv([v for e in attacked for v in e["visits"]], list(target_keys))
    return EvalReport(
        kind=artifact.kind if artifact is not None else "identity", n_episodes=n_episodes,
        attack_reward_mean=float(ar.mean()), attack_reward_std=float(ar.std()),
        clean_reward_mean=float(cr.mean()), clean_reward_std=float(cr.std()),
        success_rate=float(np.mean([e["success"] for e in attacked])),
        clean_success_rate=float(np.mean([e["success"] for e in clean])),
        attacked_victim_reward_mean=float(np.mean([e["victim"] for e in attacked])),
        clean_attack_reward_mean=float(np.mean([e["adversary"] for e in clean])),
        tv_to_target=tv)


def demo_keys(world, demos) -> list:
    return [_state_key(world, np.asarray(st.state)) for ep in demos.episodes for st in ep.steps]
