import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from samdp_lab.attacks import AttackArtifact, PolicyAdversary, make_victim
from samdp_lab.defense import (DefenseConfig, adversary_gain, defense_metrics, grid_candidates,
                               inner_max_exhaustive, inner_max_pgd, tabular_candidates,
                               tdrt_regularizer, tdrt_train, time_weights)
from samdp_lab.diffnet import kl_between_heads
from samdp_lab.envs import GridWorld, default_budget, make_vec_env
from samdp_lab.errors import StructuralError
from samdp_lab.exact_oracle import expected_return
from samdp_lab.mdp_core import (DiscreteNeighbors, LinfBall, TabularAdversary, TabularPolicy,
                                 compose_policy)
from samdp_lab.policy_opt import Policy, PpoConfig, ppo_train

from conftest import random_instance
from gradcheck import regularizer_case

SMALL = PpoConfig(iters=3, steps_per_iter=256, n_envs=4, discount=0.99, lr_policy=3e-3,
                  optimizer="adam")


def test_config_validation():
    for bad in ({"lambda_reg": -1.0}, {"pgd_steps": 0}, {"inner_max": "grid"},
                {"discount_reg": 1.0}, {"reduction": "max"}, {"epsilon": -0.1}):
        with pytest.raises(StructuralError):
            DefenseConfig(**bad)
    assert DefenseConfig(epsilon=0.3, pgd_steps=5).step_size == pytest.approx(0.06)


# ---------------------------------------------------------------- weights

def test_time_weights_examples():
    np.testing.assert_allclose(time_weights([0, 1, 2], 0.99), [1.0, 0.99, 0.9801])
    np.testing.assert_array_equal(time_weights([0, 5, 9], 0.5, time_discounted=False), 1.0)
    # tiny weights are dropped only past the episode cap
    w = time_weights([600, 10], 0.9, floor=1e-6, cap=512)
    assert w[0] == 0.0 and w[1] == pytest.approx(0.9**10)


def test_regularizer_weights_constant_kl():
    # a single-state input: every sampled state has the same inner-max KL
    pol = Policy.build(3, 4, "discrete", rng=0)
    obs = np.tile([0.1, -0.2, 0.3], (3, 1))
    cfg = DefenseConfig(reduction="sum", inner_max="exhaustive")
    alt = np.array([0.4, 0.1, 0.0])

    def cands(o):
        return np.stack([o, np.tile(alt, (len(o), 1))]), np.ones((2, len(o)), bool)

    r = tdrt_regularizer(pol, obs, [0, 1, 2], cfg, 0.99, candidates_fn=cands)
    k = kl_between_heads(pol.dist(obs[:1]), pol.dist(alt[None]))[0]
    assert r.value == pytest.approx(k * (1 + 0.99 + 0.9801), rel=1e-12)


# ---------------------------------------------------------------- regularizer

@given(st.integers(0, 1000))
def test_zero_budget_gives_zero(seed):
    rng = np.random.default_rng(seed)
    pol = Policy.build(3, 4, "discrete", rng=seed)
    obs = rng.normal(size=(6, 3))
    r = tdrt_regularizer(pol, obs, np.arange(6), DefenseConfig(epsilon=0.0), rng=rng)
    assert r.value == 0.0
    assert np.all(r.tape.flat() == 0)


def test_exhaustive_matches_brute_force():
    samdp, _ = random_instance(3, n_states=5, n_actions=3, max_budget=3)
    budget = samdp.perturbation
    pol = Policy.build(5, 3, "discrete", rng=4)
    obs = np.eye(5)
    clean = pol.dist(obs)
    s_hat, kl = inner_max_exhaustive(pol, obs, clean, tabular_candidates(budget))
    for s in range(5):
        brute = max(kl_between_heads(pol.dist(obs[s:s + 1]), pol.dist(obs[j:j + 1]))[0]
                    for j in budget.neighbors[s])
        assert kl[s] == pytest.approx(brute, abs=1e-14)
        assert int(np.argmax(s_hat[s])) in budget.neighbors[s]


def test_grid_candidates_respect_walls():
    world = GridWorld()
    cells = np.array(world.nonterminal_cells)
    cands, valid = grid_candidates(world)(world.encode(cells))
    for k in range(cands.shape[0]):
        for i in np.flatnonzero(valid[k]):
            assert world.is_free(tuple(world.decode(cands[k, i:i + 1])[0]))


@given(st.integers(0, 1000))
def test_pgd_stays_in_ball_and_beats_start(seed):
    rng = np.random.default_rng(seed)
    pol = Policy.build(3, 4, "discrete", rng=seed)
    obs = rng.normal(size=(5, 3))
    clean = pol.dist(obs)
    s_hat, kl = inner_max_pgd(pol, obs, clean, 0.3, 5, 0.06, rng)
    assert np.all(np.abs(s_hat - obs) <= 0.3 + 1e-12)
    assert np.all(kl >= 0.0)
    np.testing.assert_allclose(kl, kl_between_heads(clean, pol.dist(s_hat)), atol=1e-12)


def test_regularizer_needs_time_index():
    pol = Policy.build(2, 4, "discrete", rng=0)
    with pytest.raises(StructuralError):
        tdrt_regularizer(pol, np.zeros((2, 2)), None, DefenseConfig())
    with pytest.raises(StructuralError):
        tdrt_regularizer(pol, np.zeros((2, 2)), [0], DefenseConfig())


@pytest.mark.parametrize("seed", range(6))
def test_regularizer_gradient(seed):
    err, clean_grad = regularizer_case(seed)
    assert err <= 1e-4
    assert clean_grad <= 1e-8


# ---------------------------------------------------------------- training

def test_lambda_zero_is_plain_ppo():
    world = GridWorld()
    plain = ppo_train(make_vec_env(world, SMALL.n_envs, "victim"), SMALL)
    reg = tdrt_train(world, SMALL, DefenseConfig(lambda_reg=0.0))
    np.testing.assert_array_equal(plain.policy.net.get_flat(), reg.policy.net.get_flat())


def test_tdrt_train_records_metrics():
    res = tdrt_train(GridWorld(), SMALL, DefenseConfig(lambda_reg=1.0, epsilon=0.5), seed=1)
    rows = defense_metrics(res)
    assert len(rows) == SMALL.iters
    assert all(r["reg_value"] >= 0 and r["lambda"] == 1.0 for r in rows)
    assert all(r["inner_max_iters"] > 0 for r in rows)


def test_exhaustive_training_on_tabular_instance():
    samdp, _ = random_instance(5, n_states=4, n_actions=2, max_budget=2)
    cfg = PpoConfig(iters=2, steps_per_iter=128, n_envs=4, discount=0.9)
    res = tdrt_train(samdp.mdp, cfg, DefenseConfig(inner_max="exhaustive"),
                     budget=samdp.perturbation)
    assert np.all(np.isfinite(res.policy.net.get_flat()))
    with pytest.raises(StructuralError):
        tdrt_train(samdp.mdp, cfg, DefenseConfig(inner_max="exhaustive"))


# ---------------------------------------------------------------- adversary gain

def _tabular_setup(seed):
    samdp, _ = random_instance(seed, n_states=4, n_actions=2, max_budget=3, discount=0.9)
    pol = Policy.build(4, 2, "discrete", rng=seed)
    adv_pol = Policy.build(4, 4, "discrete", rng=seed + 100)
    adv = PolicyAdversary(adv_pol, "index", samdp.perturbation)
    art = AttackArtifact("reward_max", adv, samdp.perturbation)
    return samdp, pol, adv, art


def test_identity_gain_is_zero():
    world = GridWorld()
    pol = Policy.build(2, 4, "discrete", rng=0)
    gain, se = adversary_gain(make_victim(pol, "no_box"), world, None, n_episodes=20)
    assert gain == 0.0 and se == 0.0


def test_negated_reward_gain_is_return_drop():
    samdp, pol, adv, art = _tabular_setup(1)
    victim = make_victim(pol, "no_box")
    up, _ = adversary_gain(victim, samdp.mdp, art, lambda o, i: i["reward_victim"], 100, 0, 0.9, 100)
    down, _ = adversary_gain(victim, samdp.mdp, art, lambda o, i: -i["reward_victim"], 100, 0, 0.9,
                             100)
    assert down == pytest.approx(-up, abs=1e-12)


@pytest.mark.parametrize("seed", [2, 7])
def test_tabular_gain_matches_exact(seed):
    samdp, pol, adv, art = _tabular_setup(seed)
    mdp = samdp.mdp
    pi = pol.dist(np.eye(4)).probs
    mask = samdp.perturbation.mask()
    nu = TabularAdversary(adv_pol_probs(adv, mask))
    exact = (expected_return(mdp, compose_policy(TabularPolicy(pi), nu))
             - expected_return(mdp, TabularPolicy(pi)))
    gain, se = adversary_gain(make_victim(pol, "no_box"), mdp, art,
                              lambda o, i: i["reward_victim"], 600, seed, 0.9, 100)
    assert abs(gain - exact) <= 3 * se


def adv_pol_probs(adv, mask):
    p = np.where(mask, adv.policy.dist(np.eye(mask.shape[0]), mask).probs, 0.0)
    return p / p.sum(axis=1, keepdims=True)


def test_budget_types_for_candidates():
    assert tabular_candidates(DiscreteNeighbors(((0, 1), (1,))))(np.eye(2))[1].shape == (2, 2)
    assert default_budget(GridWorld()).epsilon == GridWorld().cell_size
    assert isinstance(default_budget(GridWorld()), LinfBall)
