"""Exact tabular computations used to check the attack/defense theory.

Everything here is a dense linear-algebra computation on small MDPs:
policy evaluation by a linear solve, time-t state distributions,
occupancy measures, the attack MDP whose actions are falsified states,
brute-force enumeration of deterministic adversaries, and the two
verification routines built on top of them.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CapacityError, DomainError, NumericalError, StructuralError
from .mdp_core import (DiscreteNeighbors, FiniteMdp, SaMdp, TabularAdversary,
                       TabularPolicy, compose_policy)

ENUMERATION_CAP = 10**6


# ------------------------------------------------------------ evaluation

def _policy_matrices(mdp: FiniteMdp, pi: TabularPolicy):
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise StructuralError("policy shape does not match the MDP")
    p_pi = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    r_pi = np.einsum("sa,sat,sat->s", pi.probs, mdp.transition, mdp.reward)
    return p_pi, r_pi


def policy_evaluation(mdp: FiniteMdp, pi: TabularPolicy) -> np.ndarray:
    """Solve V = R_pi + gamma P_pi V exactly."""
    p_pi, r_pi = _policy_matrices(mdp, pi)
    a = np.eye(mdp.n_states) - mdp.discount * p_pi
    v = np.linalg.solve(a, r_pi)
    resid = np.max(np.abs(a @ v - r_pi), initial=0.0)
    if not np.all(np.isfinite(v)) or resid > 1e-10 * max(1.0, np.max(np.abs(v))):
        raise NumericalError(f"Bellman solve residual {resid:.3e}")
    return v


def expected_return(mdp: FiniteMdp, pi: TabularPolicy) -> float:
    return float(mdp.initial @ policy_evaluation(mdp, pi))


def state_distribution_t(mdp: FiniteMdp, pi: TabularPolicy, t: int) -> np.ndarray:
    """d_pi^t = p0 (P_pi)^t."""
    if t < 0:
        raise StructuralError("t must be >= 0")
    p_pi, _ = _policy_matrices(mdp, pi)
    d = mdp.initial.copy()
    for _ in range(t):
        d = d @ p_pi
    return d


@dataclass(frozen=True)
class OccupancyMeasure:
    values: np.ndarray
    normalized: bool
    horizon: int
    tail_bound: float

    @property
    def state_marginal(self) -> np.ndarray:
        return self.values.sum(axis=1)


def truncation_horizon(discount: float, horizon_tol: float) -> int:
    """Smallest T with gamma^T / (1 - gamma) <= horizon_tol."""
    if horizon_tol <= 0:
        raise StructuralError("horizon_tol must be > 0")
    target = horizon_tol * (1.0 - discount)
    if target >= 1.0:
        return 0
    return int(math.ceil(math.log(target) / math.log(discount)))


def occupancy_measure(mdp: FiniteMdp, pi: TabularPolicy, horizon_tol: float = 1e-10,
                      normalized: bool = True) -> OccupancyMeasure:
    """Discounted state-action visitation, summed to the truncation horizon.

    Normalized: (1-gamma) sum_t gamma^t Pr(s_t=s, a_t=a), total mass 1.
    Unnormalized: the same without the (1-gamma) factor, total 1/(1-gamma).
    The reported tail bound is the mass (in the chosen convention) left out.
    """
    p_pi, _ = _policy_matrices(mdp, pi)
    g = mdp.discount
    horizon = truncation_horizon(g, horizon_tol)
    d = mdp.initial.copy()
    acc = np.zeros(mdp.n_states)
    w = 1.0
    for _ in range(horizon):
        acc += w * d
        d = d @ p_pi
        w *= g
    scale = (1.0 - g) if normalized else 1.0
    vals = scale * acc[:, None] * pi.probs
    tail = scale * g**horizon / (1.0 - g)
    return OccupancyMeasure(vals, normalized, horizon, tail)


# ------------------------------------------------------------ divergences

def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with 0 log(0/q) = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise StructuralError("KL arguments differ in shape")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise DomainError("p is not absolutely continuous with respect to q")
    ps, qs = p[support], q[support]
    return float(max(0.0, np.sum(ps * (np.log(ps) - np.log(qs)))))


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(0.5 * np.sum(np.abs(p - q)))


# ------------------------------------------------------------ attack MDP

def default_penalty(r_bar: np.ndarray, discount: float) -> float:
    """A C strictly below min{min R, (min R - gamma max R)/(1-gamma)}."""
    lo, hi = float(np.min(r_bar)), float(np.max(r_bar))
    return lo - (hi - lo) * discount / (1.0 - discount) - 1.0


@dataclass(frozen=True)
class AttackMdp:
    """Decision process whose actions are falsified states; the victim is
    folded into the dynamics."""

    transition_hat: np.ndarray  # (S, S_hat, S')
    reward_hat: np.ndarray      # (S, S_hat, S')
    discount: float
    penalty_C: float
    in_budget: np.ndarray       # (S, S_hat) bool
    initial: np.ndarray

    @property
    def n_states(self) -> int:
        return self.transition_hat.shape[0]

    def as_finite_mdp(self) -> FiniteMdp:
        return FiniteMdp(self.transition_hat, self.reward_hat, self.discount, self.initial)


def build_attack_mdp(samdp: SaMdp, pi: TabularPolicy, r_bar=None,
                     penalty_C: float | None = None) -> AttackMdp:
    """Fold victim ``pi`` into the dynamics.

    p_hat(s'|s,shat) = sum_a pi(a|shat) p(s'|s,a)
    R_hat(s,shat,s') = sum_a pi(a|shat) p(s'|s,a) rbar(s,a,s') / p_hat(s'|s,shat)
    for shat in B(s); C otherwise.  Entries with p_hat = 0 are unreachable and
    carry reward 0.
    """
    mdp = samdp.mdp
    if not isinstance(mdp, FiniteMdp):
        raise StructuralError("attack MDP construction needs a finite SA-MDP")
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise StructuralError("policy shape does not match the MDP")
    r = mdp.reward if r_bar is None else np.asarray(r_bar, dtype=float)
    if r.shape == (mdp.n_states, mdp.n_actions):
        r = np.repeat(r[:, :, None], mdp.n_states, axis=2)
    if r.shape != mdp.transition.shape or not np.all(np.isfinite(r)):
        raise StructuralError("r_bar must be a finite (S, A[, S]) table")
    if penalty_C is None:
        penalty_C = default_penalty(r, mdp.discount)
    # weight[s, shat, a, s'] = pi(a|shat) p(s'|s,a)
    weight = np.einsum("ha,sat->shat", pi.probs, mdp.transition)
    p_hat = weight.sum(axis=2)
    num = np.einsum("shat,sat->sht", weight, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        r_hat = np.where(p_hat > 0, num / np.where(p_hat > 0, p_hat, 1.0), 0.0)
    mask = samdp.perturbation.mask()
    r_hat = np.where(mask[:, :, None], r_hat, float(penalty_C))
    # renormalise rows against rounding
    p_hat = p_hat / p_hat.sum(axis=2, keepdims=True)
    return AttackMdp(p_hat, r_hat, mdp.discount, float(penalty_C), mask, mdp.initial)


def enumerate_deterministic_adversaries(samdp: SaMdp,
                                        cap: int = ENUMERATION_CAP) -> list[TabularAdversary]:
    budget = samdp.perturbation
    if not isinstance(budget, DiscreteNeighbors):
        raise StructuralError("enumeration needs a DiscreteNeighbors budget")
    count = math.prod(len(row) for row in budget.neighbors)
    if count > cap:
        raise CapacityError(f"{count} deterministic adversaries exceed the cap of {cap}")
    return [TabularAdversary.from_map(m) for m in itertools.product(*budget.neighbors)]


def optimal_policy(mdp: FiniteMdp, action_mask: np.ndarray | None = None,
                   max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Policy iteration; returns (deterministic action per state, V*)."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    allowed = np.ones((n_s, n_a), bool) if action_mask is None else np.asarray(action_mask, bool)
    r_sa = np.einsum("sat,sat->sa", mdp.transition, mdp.reward)
    actions = np.argmax(allowed, axis=1)
    for _ in range(max_iter):
        v = policy_evaluation(mdp, TabularPolicy.deterministic(actions, n_a))
        q = r_sa + mdp.discount * mdp.transition @ v
        q = np.where(allowed, q, -np.inf)
        best = q.max(axis=1)
        improve = best > q[np.arange(n_s), actions] + 1e-12
        if not improve.any():
            return actions, v
        actions = np.where(improve, np.argmax(q, axis=1), actions)
    raise NumericalError("policy iteration did not converge")


def finite_horizon_optimal(transition: np.ndarray, reward: np.ndarray, horizon: int,
                           action_mask: np.ndarray | None = None):
    """Undiscounted backward induction over ``horizon`` steps.

    ``transition`` and ``reward`` are (S, K, S).  Returns (V_0, per-step greedy
    actions of shape (horizon, S)).
    """
    n_s, n_k, _ = transition.shape
    allowed = np.ones((n_s, n_k), bool) if action_mask is None else action_mask
    r_sk = np.einsum("skt,skt->sk", transition, reward)
    v = np.zeros(n_s)
    plan = np.zeros((horizon, n_s), dtype=int)
    for h in reversed(range(horizon)):
        q = r_sk + transition @ v
        q = np.where(allowed, q, -np.inf)
        plan[h] = np.argmax(q, axis=1)
        v = q.max(axis=1)
    return v, plan


# ------------------------------------------------------------ reports

def instance_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class Lemma1Report:
    instance: str
    n_adversaries: int
    max_residual: float
    argmax_agree: bool
    passed: bool
    counterexample: dict | None = None

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def verify_lemma1(samdp: SaMdp, pi: TabularPolicy, r_bar=None, tol: float = 1e-10,
                  penalty_C: float | None = None, tie_tol: float = 1e-9) -> Lemma1Report:
    """Compare every deterministic in-budget adversary's value in the attack
    MDP against the composite policy's value in the original MDP."""
    mdp = samdp.mdp
    r = mdp.reward if r_bar is None else np.asarray(r_bar, float)
    base = mdp.with_reward(r)
    amdp = build_attack_mdp(samdp, pi, r, penalty_C)
    hat = amdp.as_finite_mdp()
    advs = enumerate_deterministic_adversaries(samdp)
    j_hat = np.empty(len(advs))
    j_orig = np.empty(len(advs))
    worst, worst_i = 0.0, -1
    for i, nu in enumerate(advs):
        j_hat[i] = expected_return(hat, TabularPolicy(nu.probs))
        j_orig[i] = expected_return(base, compose_policy(pi, nu))
        d = abs(j_hat[i] - j_orig[i])
        if d > worst:
            worst, worst_i = d, i
    set_hat = set(np.flatnonzero(j_hat >= j_hat.max() - tie_tol))
    set_orig = set(np.flatnonzero(j_orig >= j_orig.max() - tie_tol))
    agree = set_hat == set_orig
    passed = worst <= tol and agree
    dump = None
    if not passed:
        dump = {
            "transition": mdp.transition.tolist(), "reward": r.tolist(),
            "discount": mdp.discount, "initial": mdp.initial.tolist(),
            "policy": pi.probs.tolist(), "budget": [list(b) for b in samdp.perturbation.neighbors],
            "worst_adversary": advs[worst_i].as_map().tolist() if worst_i >= 0 else None,
        }
    return Lemma1Report(instance_hash(mdp.transition, r, pi.probs), len(advs), worst,
                        agree, passed, dump)


@dataclass
class Theorem2Report:
    instance: str
    applicable: bool
    lhs: float = float("nan")
    rhs: float = float("nan")
    rhs_exact: float = float("nan")
    rhs_tight: float = float("nan")
    holds: bool = False
    holds_tight: bool = False
    horizon: int = 0
    note: str = ""
    extras: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def normalized_value(mdp: FiniteMdp, pi: TabularPolicy) -> float:
    """sum_{s,a} rho_pi(s,a) r(s,a) with rho normalized to mass 1."""
    return (1.0 - mdp.discount) * expected_return(mdp, pi)


def verify_theorem2(samdp: SaMdp, pi: TabularPolicy, nu: TabularAdversary, r_tgt,
                    r_bar_tgt: float, horizon_tol: float = 1e-6,
                    slack: float = 1e-9) -> Theorem2Report:
    """Check ((J_tgt(pi o nu) - J_tgt(pi)) / (sqrt2 Rbar))^2
    <= sum_t gamma^t/(1-gamma) E_{d_pi^t} KL(pi || pi o nu)."""
    mdp = samdp.mdp
    r = np.asarray(r_tgt, dtype=float)
    key = instance_hash(mdp.transition, r, pi.probs, nu.probs)
    if r_bar_tgt <= 0 or np.any(np.abs(r) > r_bar_tgt + 1e-15):
        raise DomainError("|R_tgt| must be bounded by a positive R_bar_tgt")
    nu.check_budget(samdp.perturbation)
    comp = compose_policy(pi, nu)
    g = mdp.discount
    p_pi, _ = _policy_matrices(mdp, pi)

    # per-state KL, only where pi actually visits
    visit = np.linalg.solve(np.eye(mdp.n_states) - g * p_pi.T, mdp.initial)
    kl = np.zeros(mdp.n_states)
    for s in range(mdp.n_states):
        try:
            kl[s] = kl_divergence(pi.probs[s], comp.probs[s])
        except DomainError:
            if visit[s] > 0:
                return Theorem2Report(key, False, note=f"support violation at state {s}")
            kl[s] = 0.0

    tgt = mdp.with_reward(r)
    gain = normalized_value(tgt, comp) - normalized_value(tgt, pi)
    lhs = (gain / (math.sqrt(2.0) * r_bar_tgt)) ** 2

    horizon = truncation_horizon(g, horizon_tol)
    d = mdp.initial.copy()
    series = 0.0
    w = 1.0
    for _ in range(horizon):
        series += w * float(d @ kl)
        d = d @ p_pi
        w *= g
    series_exact = float(visit @ kl)
    rhs = series / (1.0 - g)
    rhs_tight = series / (1.0 - g * g)
    return Theorem2Report(
        key, True, lhs, rhs, series_exact / (1.0 - g), rhs_tight,
        holds=lhs <= rhs + slack, holds_tight=lhs <= rhs_tight + slack, horizon=horizon,
        extras={"gain": gain, "kl_series": series})
