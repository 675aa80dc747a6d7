"""Desk-scale environments and instance generators.

* random tabular SA-MDPs for the exact checks,
* a coordinate-observation gridworld with a victim goal and an adversary goal,
* a continuous point-mass task,
* batched ("vectorised") wrappers used by the PPO engine,
* a demonstration recorder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityError, StructuralError
from .mdp_core import (DiscreteNeighbors, FiniteMdp, LinfBall, SaMdp, Step, Trajectory,
                       trajectories_to_jsonl)

# ------------------------------------------------------------ random tabular instances


@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int = 3
    n_actions: int = 2
    max_budget: int = 3
    discount: float = 0.9
    reward_range: tuple = (-1.0, 1.0)
    sparsity: float = 0.0
    seed: int = 0
    min_policy_prob: float = 0.0

    def __post_init__(self):
        if not 1 <= self.n_states <= 6:
            raise CapacityError("n_states must be in [1, 6]")
        if not 1 <= self.n_actions <= 3:
            raise CapacityError("n_actions must be in [1, 3]")
        if not 1 <= self.max_budget <= 3:
            raise CapacityError("|B(s)| must be in [1, 3]")
        if not 0.0 <= self.sparsity < 1.0:
            raise StructuralError("sparsity must be in [0, 1)")


def _random_simplex(rng, n: int, sparsity: float) -> np.ndarray:
    w = rng.gamma(1.0, size=n)
    if sparsity > 0 and n > 1:
        drop = rng.random(n) < sparsity
        drop[rng.integers(n)] = False
        w = np.where(drop, 0.0, w)
    if w.sum() <= 0:
        w[rng.integers(n)] = 1.0
    return w / w.sum()


def generate_random_samdp(spec: RandomMdpSpec) -> SaMdp:
    """Dirichlet(1) transition rows, uniform rewards, random B(s) containing s."""
    rng = np.random.default_rng(spec.seed)
    n, m = spec.n_states, spec.n_actions
    p = np.array([[_random_simplex(rng, n, spec.sparsity) for _ in range(m)] for _ in range(n)])
    lo, hi = spec.reward_range
    r = rng.uniform(lo, hi, size=(n, m, n))
    p0 = _random_simplex(rng, n, 0.0)
    budget = []
    for s in range(n):
        k = int(rng.integers(1, min(spec.max_budget, n) + 1))
        others = [x for x in rng.permutation(n).tolist() if x != s][: k - 1]
        budget.append(tuple(sorted([s] + others)))
    return SaMdp(FiniteMdp(p, r, spec.discount, p0), DiscreteNeighbors(tuple(budget)))


def random_tabular_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                          min_prob: float = 0.0) -> np.ndarray:
    probs = np.array([_random_simplex(rng, n_actions, 0.0) for _ in range(n_states)])
    if min_prob > 0:
        probs = min_prob + (1.0 - n_actions * min_prob) * probs
    return probs / probs.sum(axis=1, keepdims=True)


# ------------------------------------------------------------ gridworld

ACTIONS = ((0, 1), (0, -1), (-1, 0), (1, 0))  # up, down, left, right
ACTION_NAMES = ("up", "down", "left", "right")
OFFSETS = tuple((dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1))  # 9 adversary moves

# Default 7x7 layout, top row first.  The victim's route runs right along
# the y=1 corridor and up the right column.  B sits below the corridor; the
# pocket cell diagonally above-right of B exits only downward, so showing it
# while the victim stands above B is the one falsification that steers it in.
DEFAULT_LAYOUT = (
    "######A",
    "######.",
    "######.",
    "######.",
    "####.#.",
    "S......",
    "###B###",
)


def _layout_cells(rows, char: str) -> tuple:
    h = len(rows)
    return tuple((x, h - 1 - i) for i, row in enumerate(rows) for x, ch in enumerate(row) if ch == char)


@dataclass(frozen=True)
class GridWorld:
    """Grid with cell walls; observations are normalized (x, y) in [0, 1]^2.

    Entering either goal cell ends the episode.  The victim's task pays
    ``goal_reward`` on reaching ``goal_victim``; the adversary's task pays it
    on reaching ``goal_adversary``; both pay ``step_reward`` otherwise.
    """

    width: int = 7
    height: int = 7
    walls: frozenset = frozenset(_layout_cells(DEFAULT_LAYOUT, "#"))
    goal_victim: tuple = _layout_cells(DEFAULT_LAYOUT, "A")[0]
    goal_adversary: tuple = _layout_cells(DEFAULT_LAYOUT, "B")[0]
    start_cells: tuple = _layout_cells(DEFAULT_LAYOUT, "S")
    step_reward: float = -0.01
    goal_reward: float = 1.0
    max_steps: int = 100

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(tuple(map(int, c)) for c in self.walls))
        object.__setattr__(self, "goal_victim", tuple(map(int, self.goal_victim)))
        object.__setattr__(self, "goal_adversary", tuple(map(int, self.goal_adversary)))
        object.__setattr__(self, "start_cells", tuple(tuple(map(int, c)) for c in self.start_cells))
        if self.width < 2 or self.height < 2:
            raise StructuralError("grid must be at least 2x2")
        if self.goal_victim == self.goal_adversary:
            raise StructuralError("goals must be distinct")
        for c in (self.goal_victim, self.goal_adversary, *self.start_cells):
            if not self.in_bounds(c) or c in self.walls:
                raise StructuralError(f"cell {c} is a wall or out of bounds")
        if not self.start_cells:
            raise StructuralError("need at least one start cell")
        dist_v, dist_a = self.distances_to(self.goal_victim), self.distances_to(self.goal_adversary)
        for c in self.start_cells:
            if c in (self.goal_victim, self.goal_adversary):
                raise StructuralError("start cells cannot be goals")
            if dist_v.get(c) is None or dist_a.get(c) is None:
                raise StructuralError(f"goals not reachable from start {c}")

    # construction ------------------------------------------------------
    @classmethod
    def from_ascii(cls, rows: Sequence[str], **kw) -> "GridWorld":
        """Rows listed top (largest y) to bottom.  ``#`` wall, ``A`` victim
        goal, ``B`` adversary goal, ``S`` start cell, anything else free."""
        rows = [r.replace(" ", "") for r in rows]
        h, w = len(rows), len(rows[0])
        walls, starts, ga, gb = set(), [], None, None
        for i, row in enumerate(rows):
            if len(row) != w:
                raise StructuralError("ragged layout")
            y = h - 1 - i
            for x, ch in enumerate(row):
                if ch == "#":
                    walls.add((x, y))
                elif ch == "A":
                    ga = (x, y)
                elif ch == "B":
                    gb = (x, y)
                elif ch == "S":
                    starts.append((x, y))
        if ga is None or gb is None or not starts:
            raise StructuralError("layout needs A, B and at least one S")
        return cls(width=w, height=h, walls=frozenset(walls), goal_victim=ga,
                   goal_adversary=gb, start_cells=tuple(starts), **kw)

    def to_ascii(self) -> list[str]:
        rows = []
        for y in reversed(range(self.height)):
            row = ""
            for x in range(self.width):
                c = (x, y)
                row += ("#" if c in self.walls else "A" if c == self.goal_victim else
                        "B" if c == self.goal_adversary else "S" if c in self.start_cells else ".")
            rows.append(row)
        return rows

    def with_starts(self, starts) -> "GridWorld":
        import dataclasses
        return dataclasses.replace(self, start_cells=tuple(tuple(c) for c in starts))

    # geometry ----------------------------------------------------------
    def in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def is_free(self, c) -> bool:
        return self.in_bounds(c) and tuple(c) not in self.walls

    @property
    def free_cells(self) -> list[tuple]:
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if (x, y) not in self.walls]

    @property
    def nonterminal_cells(self) -> list[tuple]:
        return [c for c in self.free_cells if c not in (self.goal_victim, self.goal_adversary)]

    @property
    def cell_size(self) -> float:
        """L-inf distance between adjacent cells in observation space."""
        return 1.0 / (max(self.width, self.height) - 1)

    def encode(self, cells) -> np.ndarray:
        c = np.asarray(cells, dtype=float)
        return c / np.array([self.width - 1, self.height - 1], dtype=float)

    def decode(self, obs) -> np.ndarray:
        o = np.asarray(obs, dtype=float)
        c = np.rint(o * np.array([self.width - 1, self.height - 1]))
        return np.clip(c, 0, [self.width - 1, self.height - 1]).astype(int)

    def neighbors(self, c) -> list[tuple]:
        """Free cells within Chebyshev distance one, including ``c``."""
        out = []
        for dx, dy in OFFSETS:
            n = (c[0] + dx, c[1] + dy)
            if self.is_free(n):
                out.append(n)
        return out

    def offset_mask(self, cells) -> np.ndarray:
        cells = np.atleast_2d(np.asarray(cells, dtype=int))
        m = np.zeros((len(cells), len(OFFSETS)), dtype=bool)
        for k, (dx, dy) in enumerate(OFFSETS):
            for i, (x, y) in enumerate(cells):
                m[i, k] = self.is_free((x + dx, y + dy))
        return m

    def distances_to(self, goal) -> dict:
        from collections import deque
        dist = {tuple(goal): 0}
        q = deque([tuple(goal)])
        while q:
            c = q.popleft()
            for dx, dy in ACTIONS:
                n = (c[0] + dx, c[1] + dy)
                if self.is_free(n) and n not in dist:
                    dist[n] = dist[c] + 1
                    q.append(n)
        return dist

    # dynamics -----------------------------------------------------------
    def move(self, cell, action: int) -> tuple:
        dx, dy = ACTIONS[int(action)]
        n = (cell[0] + dx, cell[1] + dy)
        return n if self.is_free(n) else tuple(cell)

    def task_reward(self, next_cell, task: str = "victim") -> tuple[float, bool]:
        nc = tuple(next_cell)
        goal = self.goal_victim if task == "victim" else self.goal_adversary
        done = nc in (self.goal_victim, self.goal_adversary)
        return (self.goal_reward if nc == goal else self.step_reward), done


def gridworld_step(world: GridWorld, cell, action: int, task: str = "victim"):
    """One transition from ``cell``; returns (next_cell, reward, done)."""
    if not 0 <= int(action) < len(ACTIONS):
        raise StructuralError(f"invalid gridworld action {action}")
    nc = world.move(tuple(cell), action)
    r, done = world.task_reward(nc, task)
    return nc, r, done


def gridworld_tabular(world: GridWorld, discount: float = 0.99, task: str = "victim"):
    """Exact tabular view: (FiniteMdp, cell list, index map).  Goal cells are
    absorbing with zero reward."""
    cells = world.free_cells
    index = {c: i for i, c in enumerate(cells)}
    n, m = len(cells), len(ACTIONS)
    p = np.zeros((n, m, n))
    r = np.zeros((n, m, n))
    terminal = {world.goal_victim, world.goal_adversary}
    for c in cells:
        for a in range(m):
            if c in terminal:
                p[index[c], a, index[c]] = 1.0
                continue
            nc = world.move(c, a)
            rew, _ = world.task_reward(nc, task)
            p[index[c], a, index[nc]] = 1.0
            r[index[c], a, index[nc]] = rew
    p0 = np.zeros(n)
    for c in world.start_cells:
        p0[index[c]] += 1.0 / len(world.start_cells)
    budget = DiscreteNeighbors(tuple(tuple(index[nb] for nb in world.neighbors(c)) for c in cells))
    return SaMdp(FiniteMdp(p, r, discount, p0), budget), cells, index


# ------------------------------------------------------------ point mass


@dataclass(frozen=True)
class PointMass:
    """2-D point mass in [-1, 1]^2; state (px, py, vx, vy); force in [-1, 1]^2.

    Reward is the decrease in distance to the task's goal.
    """

    dt: float = 0.1
    damping: float = 0.2
    goal_victim: tuple = (0.7, 0.7)
    goal_adversary: tuple = (-0.7, -0.7)
    goal_radius: float = 0.1
    start: tuple = (0.0, 0.0)
    start_noise: float = 0.05
    max_steps: int = 100

    def step(self, state, force, task: str = "victim"):
        s = np.asarray(state, dtype=float)
        a = np.clip(np.asarray(force, dtype=float), -1.0, 1.0)
        pos, vel = s[..., :2], s[..., 2:]
        vel = vel + self.dt * (a - self.damping * vel)
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        nxt = np.concatenate([pos, vel], axis=-1)
        goal = np.asarray(self.goal_victim if task == "victim" else self.goal_adversary)
        d0 = np.linalg.norm(s[..., :2] - goal, axis=-1)
        d1 = np.linalg.norm(pos - goal, axis=-1)
        done = (np.linalg.norm(pos - np.asarray(self.goal_victim), axis=-1) < self.goal_radius) | \
               (np.linalg.norm(pos - np.asarray(self.goal_adversary), axis=-1) < self.goal_radius)
        return nxt, d0 - d1, done

    def reached(self, state, task: str = "adversary") -> np.ndarray:
        goal = np.asarray(self.goal_victim if task == "victim" else self.goal_adversary)
        return np.linalg.norm(np.asarray(state)[..., :2] - goal, axis=-1) < self.goal_radius


def pointmass_step(world: PointMass, state, force, task: str = "victim"):
    nxt, r, done = world.step(state, force, task)
    return nxt, float(r), bool(done)


# ------------------------------------------------------------ batched environments


class VecEnv:
    """Minimal batched environment protocol used by the PPO engine.

    ``step`` returns observations *after* automatic reset together with an
    ``info`` dict carrying the pre-reset next observation, per-env time index
    of the step just taken, and task-specific flags.
    """

    n_envs: int
    obs_dim: int
    action_kind: str  # "discrete" or "box"
    action_dim: int

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, actions, rng: np.random.Generator):
        raise NotImplementedError

    def action_mask(self) -> np.ndarray | None:
        return None


class GridVecEnv(VecEnv):
    action_kind = "discrete"
    action_dim = len(ACTIONS)
    obs_dim = 2

    def __init__(self, world: GridWorld, n_envs: int = 8, task: str = "victim"):
        self.world, self.n_envs, self.task = world, n_envs, task
        self.cells = np.zeros((n_envs, 2), dtype=int)
        self.t = np.zeros(n_envs, dtype=int)
        self._move = self._move_table()

    def _move_table(self) -> dict:
        tab = {}
        for c in self.world.free_cells:
            for a in range(len(ACTIONS)):
                nc = self.world.move(c, a)
                rv, done = self.world.task_reward(nc, "victim")
                ra, _ = self.world.task_reward(nc, "adversary")
                tab[(c, a)] = (nc, rv, ra, done)
        return tab

    def _start(self, rng, k: int) -> np.ndarray:
        starts = np.asarray(self.world.start_cells, dtype=int)
        return starts[rng.integers(len(starts), size=k)]

    def reset(self, rng):
        self.cells = self._start(rng, self.n_envs)
        self.t[:] = 0
        return self.world.encode(self.cells)

    def observe(self) -> np.ndarray:
        return self.world.encode(self.cells)

    def step(self, actions, rng):
        actions = np.asarray(actions, dtype=int).reshape(-1)
        nxt = np.empty_like(self.cells)
        rv = np.empty(self.n_envs)
        ra = np.empty(self.n_envs)
        done = np.empty(self.n_envs, dtype=bool)
        for i in range(self.n_envs):
            nc, r_v, r_a, d = self._move[(tuple(self.cells[i]), int(actions[i]))]
            nxt[i], rv[i], ra[i], done[i] = nc, r_v, r_a, d
        rew = rv if self.task == "victim" else ra
        t_taken = self.t.copy()
        self.t += 1
        truncated = (self.t >= self.world.max_steps) & ~done
        success = np.all(nxt == np.asarray(self.world.goal_adversary), axis=1)
        reached_victim = np.all(nxt == np.asarray(self.world.goal_victim), axis=1)
        info = {"next_obs": self.world.encode(nxt), "t": t_taken, "truncated": truncated,
                "adversary_success": success, "victim_success": reached_victim,
                "next_cells": nxt.copy(), "reward_victim": rv, "reward_adversary": ra}
        end = done | truncated
        self.cells = nxt
        if end.any():
            self.cells[end] = self._start(rng, int(end.sum()))
            self.t[end] = 0
        return self.world.encode(self.cells), rew, end, info


class PointMassVecEnv(VecEnv):
    action_kind = "box"
    action_dim = 2
    obs_dim = 4

    def __init__(self, world: PointMass, n_envs: int = 8, task: str = "victim"):
        self.world, self.n_envs, self.task = world, n_envs, task
        self.state = np.zeros((n_envs, 4))
        self.t = np.zeros(n_envs, dtype=int)

    def _start(self, rng, k):
        s = np.zeros((k, 4))
        s[:, :2] = np.asarray(self.world.start) + self.world.start_noise * rng.uniform(-1, 1, (k, 2))
        return s

    def reset(self, rng):
        self.state = self._start(rng, self.n_envs)
        self.t[:] = 0
        return self.state.copy()

    def observe(self):
        return self.state.copy()

    def step(self, actions, rng):
        force = np.asarray(actions).reshape(self.n_envs, 2)
        nxt, rv, done = self.world.step(self.state, force, "victim")
        _, ra, _ = self.world.step(self.state, force, "adversary")
        rew = rv if self.task == "victim" else ra
        t_taken = self.t.copy()
        self.t += 1
        truncated = (self.t >= self.world.max_steps) & ~done
        info = {"next_obs": nxt.copy(), "t": t_taken, "truncated": truncated,
                "adversary_success": self.world.reached(nxt, "adversary"),
                "victim_success": self.world.reached(nxt, "victim"),
                "reward_victim": rv, "reward_adversary": ra}
        end = done | truncated
        self.state = nxt
        if end.any():
            self.state[end] = self._start(rng, int(end.sum()))
            self.t[end] = 0
        return self.state.copy(), rew, end, info


class TabularVecEnv(VecEnv):
    """A finite MDP with one-hot observations, truncated at ``horizon`` steps.

    Used to run learned attacks on instances small enough for exact checks.
    """

    action_kind = "discrete"

    def __init__(self, mdp: FiniteMdp, n_envs: int = 8, horizon: int = 50):
        self.mdp, self.n_envs, self.horizon = mdp, n_envs, horizon
        self.obs_dim = mdp.n_states
        self.action_dim = mdp.n_actions
        self.states = np.zeros(n_envs, dtype=int)
        self.t = np.zeros(n_envs, dtype=int)
        self._cdf_p0 = np.cumsum(mdp.initial)
        self._cdf = np.cumsum(mdp.transition, axis=2)

    def encode(self, states) -> np.ndarray:
        return np.eye(self.mdp.n_states)[np.asarray(states, dtype=int)]

    def _start(self, rng, k):
        u = rng.random(k)
        return np.minimum((u[:, None] >= self._cdf_p0[None, :]).sum(axis=1), self.mdp.n_states - 1)

    def reset(self, rng):
        self.states = self._start(rng, self.n_envs)
        self.t[:] = 0
        return self.encode(self.states)

    def observe(self):
        return self.encode(self.states)

    def step(self, actions, rng):
        a = np.asarray(actions, dtype=int).reshape(-1)
        u = rng.random(self.n_envs)
        cdf = self._cdf[self.states, a]
        nxt = np.minimum((u[:, None] >= cdf).sum(axis=1), self.mdp.n_states - 1)
        rew = self.mdp.reward[self.states, a, nxt]
        t_taken = self.t.copy()
        self.t += 1
        end = self.t >= self.horizon
        info = {"next_obs": self.encode(nxt), "t": t_taken, "truncated": end.copy(),
                "adversary_success": np.zeros(self.n_envs, dtype=bool),
                "victim_success": np.zeros(self.n_envs, dtype=bool),
                "reward_victim": rew, "reward_adversary": rew, "next_states": nxt.copy()}
        self.states = nxt
        if end.any():
            self.states[end] = self._start(rng, int(end.sum()))
            self.t[end] = 0
        return self.encode(self.states), rew, end, info

    def current_states(self) -> np.ndarray:
        return self.states.copy()


def make_vec_env(world, n_envs: int = 8, task: str = "victim") -> VecEnv:
    if isinstance(world, GridWorld):
        return GridVecEnv(world, n_envs, task)
    if isinstance(world, PointMass):
        return PointMassVecEnv(world, n_envs, task)
    if isinstance(world, FiniteMdp):
        return TabularVecEnv(world, n_envs)
    raise StructuralError(f"no batched wrapper for {type(world).__name__}")


def default_budget(world, epsilon: float | None = None) -> LinfBall:
    """Adjacent-cell budget for the gridworld; an L-inf ball otherwise."""
    if isinstance(world, GridWorld):
        return LinfBall(world.cell_size if epsilon is None else epsilon)
    return LinfBall(0.3 if epsilon is None else epsilon)


# ------------------------------------------------------------ demonstrations


@dataclass
class Demonstration:
    episodes: list = field(default_factory=list)
    actions_present: bool = True

    def __post_init__(self):
        if not self.episodes:
            raise StructuralError("a demonstration needs at least one episode")
        for ep in self.episodes:
            has = [st.action is not None for st in ep.steps]
            if self.actions_present and not all(has):
                raise StructuralError("ILfD demonstrations need actions on every step")
            if not self.actions_present and any(has):
                raise StructuralError("ILfO demonstrations must not carry actions")

    def to_jsonl(self) -> str:
        return trajectories_to_jsonl(self.episodes)

    @classmethod
    def from_trajectories(cls, trajs: list) -> "Demonstration":
        present = all(st.action is not None for ep in trajs for st in ep.steps)
        return cls(trajs, present)

    def state_action_pairs(self, encode_action: Callable) -> np.ndarray:
        rows = [np.concatenate([np.asarray(st.state, float), encode_action(st.action)])
                for ep in self.episodes for st in ep.steps]
        return np.asarray(rows)

    def state_pairs(self) -> np.ndarray:
        rows = [np.concatenate([np.asarray(st.state, float), np.asarray(st.next_state, float)])
                for ep in self.episodes for st in ep.steps]
        return np.asarray(rows)


def record_demonstrations(world, policy, n_episodes: int = 20, with_actions: bool = True,
                          seed: int = 0, task: str = "adversary", discount: float = 0.99,
                          deterministic: bool = False) -> Demonstration:
    """Roll out ``policy`` (an object with ``act(obs, rng)``) in ``world``.

    With ``with_actions=False`` the recorded steps carry no actions, which is
    the observation-only setting.
    """
    if n_episodes < 1:
        raise StructuralError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    env = make_vec_env(world, 1, task)
    episodes = []
    for k in range(n_episodes):
        obs = env.reset(rng)
        traj = Trajectory(discount=discount, episode_id=k)
        t = 0
        while True:
            a = policy.act(obs, rng, deterministic=deterministic)
            nobs, r, end, info = env.step(a, rng)
            a_rec = _plain(a[0]) if with_actions else None
            traj.steps.append(Step(t, obs[0].tolist(), None, a_rec, float(r[0]),
                                   info["next_obs"][0].tolist()))
            t += 1
            obs = nobs
            if end[0]:
                break
        episodes.append(traj)
    return Demonstration(episodes, with_actions)


def _plain(a):
    a = np.asarray(a)
    return int(a) if a.ndim == 0 and np.issubdtype(a.dtype, np.integer) else a.tolist()
