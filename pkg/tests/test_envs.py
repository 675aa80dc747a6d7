import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from samdp_lab.envs import (ACTIONS, DEFAULT_LAYOUT, OFFSETS, Demonstration, GridVecEnv, GridWorld,
                            PointMass, PointMassVecEnv, RandomMdpSpec, default_budget,
                            generate_random_samdp, gridworld_step, gridworld_tabular,
                            make_vec_env, pointmass_step, random_tabular_policy,
                            record_demonstrations)
from samdp_lab.errors import CapacityError, StructuralError
from samdp_lab.mdp_core import LinfBall, TabularAdversary

from helpers import SMALL_LAYOUT, ShortestPathVictim


# ---------------------------------------------------------------- random instances

def test_same_seed_same_instance():
    a = generate_random_samdp(RandomMdpSpec(n_states=5, n_actions=3, seed=11))
    b = generate_random_samdp(RandomMdpSpec(n_states=5, n_actions=3, seed=11))
    np.testing.assert_array_equal(a.mdp.transition, b.mdp.transition)
    np.testing.assert_array_equal(a.mdp.reward, b.mdp.reward)
    assert a.perturbation.neighbors == b.perturbation.neighbors


def test_unit_budget_is_identity_only():
    inst = generate_random_samdp(RandomMdpSpec(n_states=4, max_budget=1, seed=3))
    assert inst.perturbation.neighbors == ((0,), (1,), (2,), (3,))


def test_random_instance_invariants():
    for seed in range(1000):
        n, m, k = 1 + seed % 6, 1 + seed % 3, 1 + seed % 3
        spec = RandomMdpSpec(n_states=n, n_actions=m, max_budget=k, seed=seed,
                             sparsity=0.5 * (seed % 2))
        inst = generate_random_samdp(spec)
        p = inst.mdp.transition
        assert p.shape == (n, m, n) and np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-12)
        np.testing.assert_allclose(inst.mdp.initial.sum(), 1.0, atol=1e-12)
        assert np.all((inst.mdp.reward >= -1) & (inst.mdp.reward <= 1))
        for s, nb in enumerate(inst.perturbation.neighbors):
            assert s in nb and 1 <= len(nb) <= k and len(set(nb)) == len(nb)


def test_spec_limits():
    for bad in ({"n_states": 7}, {"n_actions": 4}, {"max_budget": 4}, {"n_states": 0}):
        with pytest.raises(CapacityError):
            RandomMdpSpec(**bad)
    with pytest.raises(StructuralError):
        RandomMdpSpec(sparsity=1.0)


@given(st.integers(0, 10_000), st.floats(0.0, 0.3))
def test_random_policy_rows(seed, floor):
    p = random_tabular_policy(np.random.default_rng(seed), 4, 3, floor)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= floor - 1e-12)


# ---------------------------------------------------------------- gridworld

def test_default_layout_round_trip():
    world = GridWorld()
    assert tuple(world.to_ascii()) == DEFAULT_LAYOUT
    assert GridWorld.from_ascii(DEFAULT_LAYOUT) == world


def test_from_ascii_small():
    world = GridWorld.from_ascii(SMALL_LAYOUT)
    assert (world.width, world.height) == (3, 3)
    assert world.walls == frozenset({(1, 1)})
    assert world.goal_victim == (2, 2) and world.goal_adversary == (2, 0)
    assert world.start_cells == ((0, 0),)


def test_bad_layouts():
    with pytest.raises(StructuralError):
        GridWorld.from_ascii(("S.A", ".."))
    with pytest.raises(StructuralError):
        GridWorld.from_ascii(("S.A", "..."))
    with pytest.raises(StructuralError):  # goal walled off
        GridWorld.from_ascii(("S#A", "##.", "B.."))


def test_wall_blocks_move():
    world = GridWorld.from_ascii(SMALL_LAYOUT)
    nc, r, done = gridworld_step(world, (1, 0), 0)  # up into the wall
    assert nc == (1, 0) and r == world.step_reward and not done
    nc, _, _ = gridworld_step(world, (0, 0), 1)  # down off the grid
    assert nc == (0, 0)
    with pytest.raises(StructuralError):
        gridworld_step(world, (0, 0), 4)


def test_goal_rewards_by_task():
    world = GridWorld.from_ascii(SMALL_LAYOUT)
    assert gridworld_step(world, (2, 1), 0, "victim") == ((2, 2), world.goal_reward, True)
    assert gridworld_step(world, (2, 1), 0, "adversary") == ((2, 2), world.step_reward, True)
    assert gridworld_step(world, (2, 1), 1, "adversary") == ((2, 0), world.goal_reward, True)


def test_encode_decode_and_neighbors():
    world = GridWorld()
    cells = np.array(world.free_cells)
    np.testing.assert_array_equal(world.decode(world.encode(cells)), cells)
    for c in world.free_cells:
        nb = world.neighbors(c)
        assert c in nb and all(world.is_free(x) for x in nb)
        assert all(max(abs(x[0] - c[0]), abs(x[1] - c[1])) <= 1 for x in nb)
        mask = world.offset_mask([c])[0]
        assert mask.sum() == len(nb) and len(mask) == len(OFFSETS)


def test_tabular_view_matches_steps():
    world = GridWorld()
    samdp, cells, index = gridworld_tabular(world, 0.99, "victim")
    terminal = {world.goal_victim, world.goal_adversary}
    for c in cells:
        for a in range(len(ACTIONS)):
            if c in terminal:
                assert samdp.mdp.transition[index[c], a, index[c]] == 1.0
                continue
            nc, r, _ = gridworld_step(world, c, a)
            assert samdp.mdp.transition[index[c], a, index[nc]] == 1.0
            assert samdp.mdp.reward[index[c], a, index[nc]] == r


def test_grid_vec_env_truncates():
    world = GridWorld(max_steps=5)
    env = GridVecEnv(world, 3)
    rng = np.random.default_rng(0)
    env.reset(rng)
    for k in range(5):
        _, _, end, info = env.step(np.full(3, 2), rng)  # keep walking left
    assert np.all(end) and np.all(info["truncated"])


# ---------------------------------------------------------------- point mass

def test_pointmass_zero_force_at_rest():
    world = PointMass()
    s = np.array([0.2, -0.3, 0.0, 0.0])
    nxt, r, done = pointmass_step(world, s, [0.0, 0.0])
    np.testing.assert_array_equal(nxt, s)
    assert r == 0.0 and not done


def test_pointmass_force_and_walls():
    world = PointMass(dt=0.1, damping=0.0)
    nxt, _, _ = pointmass_step(world, [0.0, 0.0, 0.0, 0.0], [1.0, 5.0])  # force clipped to 1
    np.testing.assert_allclose(nxt, [0.01, 0.01, 0.1, 0.1])
    nxt, _, _ = pointmass_step(world, [0.99, 0.0, 1.0, 0.0], [0.0, 0.0])
    assert nxt[0] == 1.0 and nxt[2] == 0.0


def test_pointmass_goal_terminates():
    world = PointMass()
    g = np.array(world.goal_adversary)
    _, r, done = pointmass_step(world, [*(g + 0.01), 0.0, 0.0], [0.0, 0.0], "adversary")
    assert done
    env = PointMassVecEnv(world, 2)
    obs = env.reset(np.random.default_rng(0))
    assert obs.shape == (2, 4) and np.all(np.abs(obs[:, :2]) <= world.start_noise)


def test_make_vec_env_and_budget():
    assert isinstance(make_vec_env(GridWorld(), 2), GridVecEnv)
    assert isinstance(make_vec_env(PointMass(), 2), PointMassVecEnv)
    with pytest.raises(StructuralError):
        make_vec_env("nope")
    b = default_budget(PointMass(), 0.2)
    assert isinstance(b, LinfBall) and b.epsilon == 0.2


# ---------------------------------------------------------------- demonstrations

def test_demonstrations_count_and_modes():
    world = GridWorld()
    demo = record_demonstrations(world, ShortestPathVictim(world), 20, True, seed=0)
    assert len(demo.episodes) == 20 and demo.actions_present
    obs_only = record_demonstrations(world, ShortestPathVictim(world), 3, False, seed=0)
    assert not obs_only.actions_present
    assert all(st.action is None for ep in obs_only.episodes for st in ep.steps)
    pairs = obs_only.state_pairs()
    assert pairs.shape[1] == 4
    with pytest.raises(StructuralError):
        record_demonstrations(world, ShortestPathVictim(world), 0)


def test_demonstrations_follow_dynamics():
    world = GridWorld()
    demo = record_demonstrations(world, ShortestPathVictim(world), 2, True, seed=0,
                                 deterministic=True)
    for ep in demo.episodes:
        for st_ in ep.steps:
            c = tuple(world.decode([st_.state])[0])
            nc, _, _ = gridworld_step(world, c, st_.action)
            assert tuple(world.decode([st_.next_state])[0]) == nc
        assert tuple(world.decode([ep.steps[-1].next_state])[0]) == world.goal_victim


def test_demonstrations_byte_identical():
    world = GridWorld()
    a = record_demonstrations(world, ShortestPathVictim(world), 5, True, seed=4).to_jsonl()
    b = record_demonstrations(world, ShortestPathVictim(world), 5, True, seed=4).to_jsonl()
    assert a == b and a.encode() == b.encode()


def test_demonstration_validation():
    world = GridWorld()
    demo = record_demonstrations(world, ShortestPathVictim(world), 1, True, seed=0)
    with pytest.raises(StructuralError):
        Demonstration(demo.episodes, actions_present=False)
    with pytest.raises(StructuralError):
        Demonstration([])
    assert Demonstration.from_trajectories(demo.episodes).actions_present


def test_tabular_adversary_from_grid_budget():
    world = GridWorld.from_ascii(SMALL_LAYOUT)
    samdp, cells, _ = gridworld_tabular(world)
    TabularAdversary.from_map(list(range(len(cells)))).check_budget(samdp.perturbation)
