"""Central finite-difference oracles for the analytic gradients.

Each ``*_case(seed)`` builds a random instance and returns the largest
relative error max|g - fd| / max(1, |g|) over all checked components.
"""
import numpy as np

from samdp_lab.defense import DefenseConfig, tdrt_regularizer
from samdp_lab.diffnet import Network, kl_between_heads
from samdp_lab.policy_opt import Policy, policy_objective_grad

H = 1e-5


def rel_err(g, fd) -> float:
    g, fd = np.asarray(g, float), np.asarray(fd, float)
    return float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g)), initial=0.0))


def fd_params(net: Network, f, h: float = H) -> np.ndarray:
    theta = net.get_flat().copy()
    out = np.empty_like(theta)
    for i in range(theta.size):
        theta[i] += h
        net.set_flat(theta)
        up = f()
        theta[i] -= 2 * h
        net.set_flat(theta)
        down = f()
        theta[i] += h
        out[i] = (up - down) / (2 * h)
    net.set_flat(theta)
    return out


def fd_input(f, x: np.ndarray, h: float = H) -> np.ndarray:
    x = x.copy()
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        x[idx] += h
        up = f(x)
        x[idx] -= 2 * h
        down = f(x)
        x[idx] += h
        out[idx] = (up - down) / (2 * h)
    return out


def random_network(rng, n_in=None, n_out=None, activation=None) -> Network:
    depth = int(rng.integers(0, 4))
    sizes = [n_in or int(rng.integers(1, 9))]
    sizes += [int(rng.integers(1, 17)) for _ in range(depth)]
    sizes.append(n_out or int(rng.integers(1, 6)))
    act = activation or ("tanh" if rng.random() < 0.7 else "relu")
    net = Network(sizes, act, rng, output_gain=1.0, hidden_gain=1.0)
    for b in net.biases:
        b += rng.normal(0, 0.3, size=b.shape)
    return net


def network_case(seed: int) -> float:
    """Scalar loss L = sum(c * out) + sum(out^2) / 2 through a random MLP."""
    rng = np.random.default_rng([seed, 40])
    net = random_network(rng)
    x = rng.normal(size=(int(rng.integers(1, 5)), net.layer_sizes[0]))
    c = rng.normal(size=(len(x), net.layer_sizes[-1]))

    def loss_at(inp):
        out = net(inp)
        return float(np.sum(c * out) + 0.5 * np.sum(out * out))

    out, cache = net.forward_with_cache(x)
    tape = net.backward(c + out, cache)
    e_param = rel_err(tape.flat(), fd_params(net, lambda: loss_at(x)))
    e_input = rel_err(tape.input, fd_input(loss_at, x))
    return max(e_param, e_input)


def _random_policy(rng, kind: str) -> tuple[Policy, np.ndarray, np.ndarray]:
    obs_dim, act_dim = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    out_dim = act_dim if kind == "discrete" else 2 * act_dim
    net = random_network(rng, obs_dim, out_dim, "tanh")
    for w in net.weights:
        w *= 0.5  # keeps log-stds inside the clamp
    pol = Policy(net, kind)
    obs = rng.normal(size=(int(rng.integers(2, 7)), obs_dim))
    if kind == "discrete":
        acts = rng.integers(act_dim, size=len(obs))
    else:
        acts = rng.normal(size=(len(obs), act_dim))
    return pol, obs, acts


def logprob_case(seed: int) -> float:
    rng = np.random.default_rng([seed, 41])
    kind = "discrete" if seed % 2 == 0 else "box"
    pol, obs, acts = _random_policy(rng, kind)
    w = rng.normal(size=len(obs))
    d, cache = pol.dist_with_cache(obs)
    g = d.dlogp_dlogits(acts) if kind == "discrete" else d.dlogp_doutput(acts)
    tape = pol.net.backward(w[:, None] * g, cache)
    fd = fd_params(pol.net, lambda: float(np.sum(w * pol.dist(obs).log_prob(acts))))
    return rel_err(tape.flat(), fd)


def surrogate_case(seed: int, clip_eps: float = 0.2) -> float:
    """Clipped surrogate plus entropy; ratios kept away from the clip kinks."""
    rng = np.random.default_rng([seed, 42])
    kind = "discrete" if seed % 2 == 0 else "box"
    pol, obs, acts = _random_policy(rng, kind)
    logp = pol.dist(obs).log_prob(acts)
    while True:
        shift = rng.uniform(-0.5, 0.5, size=len(obs))
        ratio = np.exp(shift)
        if np.all(np.minimum(np.abs(ratio - (1 - clip_eps)), np.abs(ratio - (1 + clip_eps))) > 1e-3):
            break
    logp_old = logp - shift
    adv = rng.normal(size=len(obs))
    ent = float(rng.uniform(0, 0.1))
    _, tape, _ = policy_objective_grad(pol, obs, acts, logp_old, adv, clip_eps, ent)
    fd = fd_params(pol.net, lambda: policy_objective_grad(pol, obs, acts, logp_old, adv,
                                                          clip_eps, ent)[0])
    return rel_err(tape.flat(), fd)


def regularizer_case(seed: int) -> tuple[float, float]:
    """(relative error of the perturbed-branch gradient, clean-branch gradient norm).

    The clean head is frozen from the current parameters, so differencing the
    parameters moves only the perturbed branch.  The clean-branch gradient is
    measured as the difference between the tape with the clean head computed
    internally and with it supplied as a constant; a stop-gradient branch
    contributes nothing, so the two must coincide.
    """
    rng = np.random.default_rng([seed, 43])
    kind = "discrete" if seed % 2 == 0 else "box"
    pol, obs, _ = _random_policy(rng, kind)
    t = rng.integers(0, 20, size=len(obs))
    cfg = DefenseConfig(lambda_reg=0.3, epsilon=float(rng.uniform(0.05, 0.5)), pgd_steps=3,
                        reduction="sum" if seed % 3 else "mean")
    clean = pol.dist(obs)
    res = tdrt_regularizer(pol, obs, t, cfg, 0.9, rng=np.random.default_rng(seed),
                           clean_head=clean)
    s_hat, w = res.s_hat, res.weights
    scale = 1.0 / len(obs) if cfg.reduction == "mean" else 1.0

    def value():
        return float(scale * np.sum(w * kl_between_heads(clean, pol.dist(s_hat))))

    err = rel_err(res.tape.flat(), fd_params(pol.net, value))
    internal = tdrt_regularizer(pol, obs, t, cfg, 0.9, rng=np.random.default_rng(seed))
    clean_grad = float(np.max(np.abs(internal.tape.flat() - res.tape.flat()), initial=0.0))
    return err, clean_grad
