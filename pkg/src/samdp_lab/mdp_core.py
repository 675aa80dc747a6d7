"""Finite MDPs, state-adversarial MDPs, tabular policies and trajectory records.

States of a :class:`FiniteMdp` are dense integer ids.  Vector-state
environments live in :mod:`samdp_lab.envs` and share the trajectory
records defined here.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import BudgetError, StructuralError

ROW_TOL = 1e-12
FORMAT_VERSION = 1


def _check_rows(table: np.ndarray, name: str, tol: float = ROW_TOL) -> None:
    if np.any(table < 0):
        raise StructuralError(f"{name} has negative entries")
    sums = table.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise StructuralError(f"{name} rows must sum to 1 (max deviation {worst:.3e})")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP with rewards stored as R(s, a, s').

    ``reward`` may be given as an (S, A) table; it is broadcast over the
    next state.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial: np.ndarray

    def __post_init__(self):
        p = _frozen(self.transition)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise StructuralError(f"transition must be (S, A, S), got {p.shape}")
        n_s, n_a, _ = p.shape
        if n_s < 1 or n_a < 1:
            raise StructuralError("need at least one state and one action")
        r = np.array(self.reward, dtype=float)
        if r.shape == (n_s, n_a):
            r = np.repeat(r[:, :, None], n_s, axis=2)
        if r.shape != (n_s, n_a, n_s):
            raise StructuralError(f"reward must be (S, A) or (S, A, S), got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise StructuralError("reward must be finite")
        r.setflags(write=False)
        p0 = _frozen(self.initial)
        if p0.shape != (n_s,):
            raise StructuralError(f"initial must have length {n_s}")
        _check_rows(p, "transition")
        _check_rows(p0, "initial")
        if not 0.0 < float(self.discount) < 1.0:
            raise StructuralError("discount must lie strictly inside (0, 1)")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial", p0)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_reward(self, reward) -> "FiniteMdp":
        return FiniteMdp(self.transition, reward, self.discount, self.initial)


@dataclass(frozen=True)
class DiscreteNeighbors:
    """B(s) as an explicit list of admissible falsified state ids per state."""

    neighbors: tuple

    def __post_init__(self):
        nb = tuple(tuple(int(x) for x in row) for row in self.neighbors)
        for s, row in enumerate(nb):
            if not row:
                raise StructuralError(f"B({s}) is empty")
            if s not in row:
                raise StructuralError(f"B({s}) must contain {s} itself")
            if len(set(row)) != len(row):
                raise StructuralError(f"B({s}) has duplicates")
        object.__setattr__(self, "neighbors", nb)

    def __len__(self) -> int:
        return len(self.neighbors)

    def __getitem__(self, s: int) -> tuple:
        return self.neighbors[s]

    def mask(self) -> np.ndarray:
        n = len(self.neighbors)
        m = np.zeros((n, n), dtype=bool)
        for s, row in enumerate(self.neighbors):
            m[s, list(row)] = True
        return m

    @classmethod
    def identity(cls, n_states: int) -> "DiscreteNeighbors":
        return cls(tuple((s,) for s in range(n_states)))


@dataclass(frozen=True)
class LinfBall:
    """B(s) = {s' : ||s' - s||_inf <= epsilon} for vector states."""

    epsilon: float

    def __post_init__(self):
        if not float(self.epsilon) >= 0.0:
            raise StructuralError("epsilon must be >= 0")
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def contains(self, s, s_hat, tol: float = 1e-12) -> bool:
        d = np.max(np.abs(np.asarray(s_hat, float) - np.asarray(s, float)), initial=0.0)
        return bool(d <= self.epsilon + tol)


PerturbationSet = DiscreteNeighbors | LinfBall


@dataclass(frozen=True)
class SaMdp:
    mdp: object
    perturbation: PerturbationSet

    def __post_init__(self):
        if isinstance(self.mdp, FiniteMdp):
            if not isinstance(self.perturbation, DiscreteNeighbors):
                raise StructuralError("finite MDPs take a DiscreteNeighbors budget")
            if len(self.perturbation) != self.mdp.n_states:
                raise StructuralError("budget table length must equal n_states")
            for row in self.perturbation.neighbors:
                if max(row) >= self.mdp.n_states or min(row) < 0:
                    raise StructuralError("budget lists an invalid state id")
        elif not isinstance(self.perturbation, LinfBall):
            raise StructuralError("vector-state environments take a LinfBall budget")


@dataclass(frozen=True)
class TabularPolicy:
    """pi(a | s) as an (S, A) row-stochastic table."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise StructuralError("policy table must be 2-D")
        _check_rows(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "TabularPolicy":
        return cls(np.eye(n_actions)[np.asarray(actions, int)])


@dataclass(frozen=True)
class TabularAdversary:
    """nu(s_hat | s) as an (S, S) row-stochastic table."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise StructuralError("adversary table must be square (S, S)")
        _check_rows(p, "adversary")
        object.__setattr__(self, "probs", p)

    @classmethod
    def identity(cls, n_states: int) -> "TabularAdversary":
        return cls(np.eye(n_states))

    @classmethod
    def from_map(cls, mapping: Sequence[int]) -> "TabularAdversary":
        n = len(mapping)
        return cls(np.eye(n)[np.asarray(mapping, int)])

    def check_budget(self, budget: DiscreteNeighbors) -> None:
        if len(budget) != self.probs.shape[0]:
            raise StructuralError("budget and adversary disagree on n_states")
        outside = np.where(~budget.mask(), self.probs, 0.0)
        if np.any(outside > 0.0):
            s = int(np.argwhere(outside > 0)[0][0])
            raise BudgetError(f"adversary puts mass outside B({s})")

    def as_map(self) -> np.ndarray | None:
        """Deterministic map s -> s_hat, or None when the adversary is stochastic."""
        if np.all((self.probs == 0.0) | (self.probs == 1.0)):
            return np.argmax(self.probs, axis=1)
        return None


def compose_policy(pi: TabularPolicy, nu: TabularAdversary,
                   budget: DiscreteNeighbors | None = None) -> TabularPolicy:
    """Behaviour of victim ``pi`` observing through adversary ``nu``:
    (pi o nu)(a|s) = sum_shat nu(shat|s) pi(a|shat)."""
    if nu.probs.shape[1] != pi.n_states:
        raise StructuralError(
            f"adversary emits {nu.probs.shape[1]} states but policy covers {pi.n_states}")
    if budget is not None:
        nu.check_budget(budget)
    out = nu.probs @ pi.probs
    # rows are convex combinations; renormalise away rounding
    out = out / out.sum(axis=1, keepdims=True)
    return TabularPolicy(out)


def discounted_return(rewards: Iterable[float], discount: float) -> float:
    total, w = 0.0, 1.0
    for r in rewards:
        total += w * float(r)
        w *= discount
    return total


def project_to_budget(s, s_hat, eps: float) -> np.ndarray:
    """Clamp ``s_hat`` into the L-inf ball of radius ``eps`` around ``s``."""
    s = np.asarray(s, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    if s.shape != s_hat.shape:
        raise StructuralError("state and falsified state differ in shape")
    if eps < 0:
        raise StructuralError("eps must be >= 0")
    return np.clip(s_hat, s - eps, s + eps)


@dataclass(frozen=True)
class Step:
    t: int
    state: object
    falsified_state: object
    action: object
    reward: float
    next_state: object


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    discount: float = 0.99
    episode_id: int = 0

    @property
    def episode_return(self) -> float:
        return discounted_return((st.reward for st in self.steps), self.discount)

    @property
    def undiscounted_return(self) -> float:
        return float(sum(st.reward for st in self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def validate(self) -> None:
        for i, st in enumerate(self.steps):
            if st.t != i:
                raise StructuralError(f"step {i} carries time index {st.t}")


def _sample_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    # inverse-CDF draw; keeps exactly one uniform per draw so streams stay aligned
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def sample_episode(samdp: SaMdp, pi: TabularPolicy, nu: TabularAdversary | None = None,
                   horizon: int = 100, rng_seed: int | np.random.Generator = 0) -> Trajectory:
    """Roll out victim ``pi`` on a finite SA-MDP, optionally under adversary ``nu``.

    The environment always transitions from the true state; only the
    victim's observation is falsified.
    """
    if horizon < 1:
        raise StructuralError("horizon must be >= 1")
    mdp = samdp.mdp
    if not isinstance(mdp, FiniteMdp):
        raise StructuralError("sample_episode works on finite SA-MDPs")
    if pi.n_states != mdp.n_states or pi.n_actions != mdp.n_actions:
        raise StructuralError("policy shape does not match the MDP")
    if nu is not None:
        nu.check_budget(samdp.perturbation)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    # point-mass rows need no draw, so an identity adversary leaves the stream intact
    point = None if nu is None else nu.as_map()
    s = _sample_index(rng, mdp.initial)
    traj = Trajectory(discount=mdp.discount)
    for t in range(horizon):
        if nu is None:
            s_hat = s
        elif point is not None:
            s_hat = int(point[s])
        else:
            s_hat = _sample_index(rng, nu.probs[s])
        a = _sample_index(rng, pi.probs[s_hat])
        s_next = _sample_index(rng, mdp.transition[s, a])
        traj.steps.append(Step(t, s, s_hat if nu is not None else None, a,
                               float(mdp.reward[s, a, s_next]), s_next))
        s = s_next
    return traj


# ---------------------------------------------------------------- serialization

def mdp_to_text(mdp: FiniteMdp) -> str:
    doc = {
        "format": "samdp-lab/finite-mdp",
        "version": FORMAT_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "discount": mdp.discount,
        "transition": mdp.transition.ravel().tolist(),
        "reward": mdp.reward.ravel().tolist(),
        "initial": mdp.initial.tolist(),
    }
    return json.dumps(doc, indent=1)


def mdp_from_text(text: str) -> FiniteMdp:
    doc = json.loads(text)
    if doc.get("format") != "samdp-lab/finite-mdp":
        raise StructuralError("not a finite-mdp document")
    if doc.get("version") != FORMAT_VERSION:
        raise StructuralError(f"unsupported finite-mdp version {doc.get('version')}")
    n, m = int(doc["n_states"]), int(doc["n_actions"])
    return FiniteMdp(np.reshape(doc["transition"], (n, m, n)),
                     np.reshape(doc["reward"], (n, m, n)),
                     doc["discount"], doc["initial"])


def _jsonable(x):
    if x is None:
        return None
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def trajectories_to_jsonl(trajs: Iterable[Trajectory]) -> str:
    lines = []
    for k, traj in enumerate(trajs):
        eid = traj.episode_id if traj.episode_id is not None else k
        for st in traj.steps:
            lines.append(json.dumps({
                "t": st.t, "s": _jsonable(st.state), "s_hat": _jsonable(st.falsified_state),
                "a": _jsonable(st.action), "r": float(st.reward),
                "s_next": _jsonable(st.next_state), "episode_id": int(eid),
            }, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def trajectories_from_jsonl(text: str, discount: float = 0.99) -> list[Trajectory]:
    by_id: dict[int, Trajectory] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = {"t", "s", "s_hat", "a", "r", "s_next", "episode_id"} - rec.keys()
        if missing:
            raise StructuralError(f"line {lineno}: missing keys {sorted(missing)}")
        eid = int(rec["episode_id"])
        traj = by_id.setdefault(eid, Trajectory(discount=discount, episode_id=eid))
        traj.steps.append(Step(int(rec["t"]), rec["s"], rec["s_hat"], rec["a"],
                               float(rec["r"]), rec["s_next"]))
    out = [by_id[k] for k in sorted(by_id)]
    for traj in out:
        traj.validate()
    return out


def iter_budget_products(budget: DiscreteNeighbors) -> Iterator[tuple]:
    import itertools
    return itertools.product(*budget.neighbors)
