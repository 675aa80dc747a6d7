import math

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from samdp_lab.diffnet import (LOG_STD_MAX, LOG_STD_MIN, Adam, Categorical, DiagGaussian,
                               Network, Sgd, categorical_head, clip_tape, dkl_dsecond,
                               gaussian_head, kl_between_heads, load_checkpoint, log_softmax,
                               save_checkpoint, stop_gradient)
from samdp_lab.errors import StructuralError
from samdp_lab.exact_oracle import kl_divergence

from gradcheck import logprob_case, network_case, random_network


def reference_forward(net, x):
    h = np.atleast_2d(x)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i == len(net.weights) - 1:
            return z
        h = np.tanh(z) if net.activation == "tanh" else np.maximum(z, 0)


# ---------------------------------------------------------------- forward

def test_zero_network_outputs_zero():
    net = Network([3, 5, 2], rng=0)
    net.set_flat(np.zeros(net.parameter_count))
    np.testing.assert_array_equal(net([1.0, -2.0, 3.0]), [[0.0, 0.0]])


def test_identity_linear_layer():
    net = Network([3, 3], rng=0)
    net.weights[0][...] = np.eye(3)
    x = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_array_equal(net(x), x)


@given(st.integers(0, 10_000))
def test_forward_matches_reference(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    x = rng.normal(size=(4, net.layer_sizes[0]))
    np.testing.assert_allclose(net(x), reference_forward(net, x), atol=1e-12, rtol=0)


def test_forward_shape_mismatch():
    with pytest.raises(StructuralError):
        Network([3, 2], rng=0)(np.zeros(4))


def test_parameter_count_and_flat_round_trip():
    net = Network([4, 8, 3], rng=1)
    assert net.parameter_count == 4 * 8 + 8 + 8 * 3 + 3
    flat = np.arange(net.parameter_count, dtype=float)
    net.set_flat(flat)
    np.testing.assert_array_equal(net.get_flat(), flat)


# ---------------------------------------------------------------- backward

def test_backward_without_forward_is_state_error():
    with pytest.raises(RuntimeError):
        Network([2, 2], rng=0).backward(np.ones((1, 2)))


def test_linear_layer_gradient_is_outer_product():
    net = Network([3, 2], rng=0)
    x = np.array([[1.0, 2.0, -1.0]])
    g = np.array([[0.5, -3.0]])
    net.forward(x)
    tape = net.backward(g)
    np.testing.assert_allclose(tape.weights[0], np.outer(x[0], g[0]), atol=1e-15)
    np.testing.assert_allclose(tape.biases[0], g[0], atol=1e-15)
    np.testing.assert_allclose(tape.input, g @ net.weights[0].T, atol=1e-15)


def test_zero_upstream_zero_tape():
    net = Network([3, 4, 2], rng=0)
    net.forward(np.ones((2, 3)))
    tape = net.backward(np.zeros((2, 2)))
    assert tape.norm() == 0.0 and np.all(tape.input == 0)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    assert network_case(seed) <= 1e-4


# ---------------------------------------------------------------- heads

def test_categorical_head_examples():
    np.testing.assert_allclose(categorical_head(np.zeros(4)), np.full(4, 0.25))
    z = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(categorical_head(z + 17.0), categorical_head(z), atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_distribution(z):
    p = categorical_head(z)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)


def test_gaussian_head_splits_and_clamps():
    mean, ls = gaussian_head(np.array([[0.1, 0.2, -9.0, 9.0]]))
    np.testing.assert_array_equal(mean, [[0.1, 0.2]])
    np.testing.assert_array_equal(ls, [[LOG_STD_MIN, LOG_STD_MAX]])
    with pytest.raises(StructuralError):
        gaussian_head(np.zeros(3))


@pytest.mark.parametrize("seed", range(10))
def test_log_prob_gradients_match_finite_differences(seed):
    assert logprob_case(seed) <= 1e-4


def test_gaussian_log_prob_closed_form():
    d = DiagGaussian(np.array([[0.5, math.log(2.0)]]))
    expected = -0.5 * ((1.5 - 0.5) / 2.0) ** 2 - math.log(2.0) - 0.5 * math.log(2 * math.pi)
    assert d.log_prob([[1.5]])[0] == pytest.approx(expected, abs=1e-14)


# ---------------------------------------------------------------- KL

def test_kl_identical_heads_zero():
    c = Categorical(np.array([[0.1, 2.0, -1.0]]))
    assert kl_between_heads(c, c)[0] == 0.0
    g = DiagGaussian(np.array([[0.3, -0.2]]))
    assert kl_between_heads(g, g)[0] == 0.0


def test_kl_unit_gaussians():
    a, b = DiagGaussian(np.array([[0.0, 0.0]])), DiagGaussian(np.array([[1.0, 0.0]]))
    assert kl_between_heads(a, b)[0] == pytest.approx(0.5, abs=1e-15)


@given(st.integers(0, 10_000))
def test_categorical_kl_matches_exact_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = Categorical(rng.normal(size=(1, 4))), Categorical(rng.normal(size=(1, 4)))
    assert abs(kl_between_heads(a, b)[0] - kl_divergence(a.probs[0], b.probs[0])) <= 1e-12


def test_kl_asymmetric():
    rng = np.random.default_rng(3)
    a, b = Categorical(rng.normal(size=(1, 3))), Categorical(rng.normal(size=(1, 3)))
    assert kl_between_heads(a, b)[0] != pytest.approx(kl_between_heads(b, a)[0], abs=1e-6)


def test_kl_dimension_mismatch():
    with pytest.raises(StructuralError):
        kl_between_heads(Categorical(np.zeros((1, 2))), Categorical(np.zeros((1, 3))))
    with pytest.raises(StructuralError):
        kl_between_heads(Categorical(np.zeros((1, 2))), DiagGaussian(np.zeros((1, 2))))


@pytest.mark.parametrize("kind", ["discrete", "box"])
def test_dkl_dsecond_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    width = 3 if kind == "discrete" else 4
    head = Categorical if kind == "discrete" else DiagGaussian
    a = head(rng.normal(0, 0.5, size=(2, width)))
    out = rng.normal(0, 0.5, size=(2, width))
    g = dkl_dsecond(a, head(out))
    fd = np.zeros_like(out)
    for idx in np.ndindex(out.shape):
        up, down = out.copy(), out.copy()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        fd[idx] = (kl_between_heads(a, head(up)).sum() - kl_between_heads(a, head(down)).sum()) / 2e-6
    np.testing.assert_allclose(g, fd, atol=1e-7)


# ---------------------------------------------------------------- misc

def test_stop_gradient_is_frozen_copy():
    x = np.array([1.0, 2.0])
    y = stop_gradient(x)
    np.testing.assert_array_equal(x, y)
    with pytest.raises(ValueError):
        y[0] = 3.0


def test_optimizers_move_against_gradient():
    for opt_cls in (Sgd, Adam):
        net = Network([1, 1], rng=0)
        net.weights[0][...] = 2.0
        opt = opt_cls(net, 0.1)
        for _ in range(200):
            out, cache = net.forward_with_cache(np.ones((1, 1)))
            opt.step(net.backward(2 * out, cache))  # minimise out^2
        assert abs(net(np.ones((1, 1)))[0, 0]) < 0.05


def test_clip_tape_bounds_norm():
    net = Network([3, 2], rng=0)
    net.forward(np.ones((1, 3)))
    tape = net.backward(np.full((1, 2), 100.0))
    clipped, norm = clip_tape(tape, 1.0)
    assert norm > 1.0 and clipped.norm() == pytest.approx(1.0)


def test_checkpoint_round_trip_and_checksum():
    net = Network([2, 5, 3], "relu", rng=4)
    text = save_checkpoint(net)
    back = load_checkpoint(text)
    np.testing.assert_array_equal(back.get_flat(), net.get_flat())
    assert back.activation == "relu"
    x = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_array_equal(back(x), net(x))
    with pytest.raises(StructuralError):
        load_checkpoint(text.replace('"version": 1', '"version": 2'))
