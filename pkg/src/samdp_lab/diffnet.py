"""A small fully-connected network with hand-written reverse-mode gradients.

Only what the attacks and defenses need: an MLP, categorical and
diagonal-Gaussian heads with closed-form log-probs and KLs, a discriminator
logit head, a stop-gradient marker, optimizers and a text checkpoint format.
Inputs are always batches of shape (N, d); a 1-D input is treated as N=1.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECKPOINT_VERSION = 1

_ACTS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(float)),
}


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


@dataclass
class Cache:
    """Activations from one forward pass; consumed by ``Network.backward``."""

    inputs: list
    outputs: list


@dataclass
class GradientTape:
    weights: list
    biases: list
    input: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for pair in zip(self.weights, self.biases) for g in pair])

    def __add__(self, other: "GradientTape") -> "GradientTape":
        return GradientTape([a + b for a, b in zip(self.weights, other.weights)],
                            [a + b for a, b in zip(self.biases, other.biases)],
                            None)

    def scale(self, c: float) -> "GradientTape":
        return GradientTape([c * g for g in self.weights], [c * g for g in self.biases],
                            None if self.input is None else c * self.input)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.weights + self.biases)))


class Network:
    """MLP: affine layers with a nonlinearity after every hidden layer."""

    def __init__(self, layer_sizes, activation: str = "tanh", rng=None,
                 output_gain: float = 1.0, hidden_gain: float = np.sqrt(2.0)):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise StructuralError("layer_sizes needs >= 2 positive entries")
        if activation not in _ACTS:
            raise StructuralError(f"unknown activation {activation!r}")
        self.layer_sizes = sizes
        self.activation = activation
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.weights, self.biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = output_gain if i == len(sizes) - 2 else hidden_gain
            self.weights.append(orthogonal(rng, n_in, n_out, gain))
            self.biases.append(np.zeros(n_out))
        self._cache: Cache | None = None

    # parameters -------------------------------------------------------
    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.parameter_count:
            raise StructuralError("flat parameter vector has the wrong length")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "Network":
        net = Network.__new__(Network)
        net.layer_sizes = list(self.layer_sizes)
        net.activation = self.activation
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net._cache = None
        return net

    def zero_tape(self) -> GradientTape:
        return GradientTape([np.zeros_like(w) for w in self.weights],
                            [np.zeros_like(b) for b in self.biases])

    # forward / backward -------------------------------------------------
    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise StructuralError(
                f"expected input width {self.layer_sizes[0]}, got shape {x.shape}")
        return x

    def forward_with_cache(self, x) -> tuple[np.ndarray, Cache]:
        h = self._as_batch(x)
        act, _ = _ACTS[self.activation]
        ins, outs = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            ins.append(h)
            z = h @ w + b
            h = z if i == last else act(z)
            outs.append(h)
        return h, Cache(ins, outs)

    def forward(self, x) -> np.ndarray:
        out, self._cache = self.forward_with_cache(x)
        return out

    def __call__(self, x) -> np.ndarray:
        """Forward pass without caching (a stop-gradient evaluation)."""
        return self.forward_with_cache(x)[0]

    def backward(self, upstream, cache: Cache | None = None) -> GradientTape:
        """Gradients of sum(output * upstream) w.r.t. parameters and input."""
        cache = cache if cache is not None else self._cache
        if cache is None:
            raise RuntimeError("backward called before any cached forward pass")
        g = np.asarray(upstream, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise StructuralError("upstream gradient shape does not match the output")
        _, dact = _ACTS[self.activation]
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        last = len(self.weights) - 1
        for i in reversed(range(len(self.weights))):
            if i != last:
                g = g * dact(cache.outputs[i])
            gw[i] = cache.inputs[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return GradientTape(gw, gb, g)


def stop_gradient(x) -> np.ndarray:
    """A value that takes part in the forward computation but receives no
    gradient; callers never backpropagate into it."""
    out = np.array(x, dtype=float, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------- heads

def categorical_head(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def gaussian_head(output) -> tuple[np.ndarray, np.ndarray]:
    out = np.asarray(output, dtype=float)
    if out.shape[-1] % 2:
        raise StructuralError("gaussian head needs an even output width")
    k = out.shape[-1] // 2
    return out[..., :k], np.clip(out[..., k:], LOG_STD_MIN, LOG_STD_MAX)


@dataclass
class Categorical:
    logits: np.ndarray
    mask: np.ndarray | None = None
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.logits, dtype=float))
        if self.mask is not None:
            z = np.where(self.mask, z, -1e9)
        self.logits = z
        self.probs = categorical_head(z)

    def log_prob(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=int).reshape(-1)
        return log_softmax(self.logits)[np.arange(len(a)), a]

    def dlogp_dlogits(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=int).reshape(-1)
        g = -self.probs.copy()
        g[np.arange(len(a)), a] += 1.0
        return g

    def entropy(self) -> np.ndarray:
        lp = log_softmax(self.logits)
        return -np.sum(np.where(self.probs > 0, self.probs * lp, 0.0), axis=-1)

    def dentropy_dlogits(self) -> np.ndarray:
        lp = log_softmax(self.logits)
        h = -np.sum(np.where(self.probs > 0, self.probs * lp, 0.0), axis=-1, keepdims=True)
        return -self.probs * (lp + h)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(self.probs.shape[0])
        c = np.cumsum(self.probs, axis=1)
        idx = (u[:, None] >= c).sum(axis=1)
        return np.minimum(idx, self.probs.shape[1] - 1)

    def mode(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass
class DiagGaussian:
    output: np.ndarray
    mean: np.ndarray = field(init=False)
    log_std: np.ndarray = field(init=False)

    def __post_init__(self):
        out = np.atleast_2d(np.asarray(self.output, dtype=float))
        self.output = out
        self.mean, self.log_std = gaussian_head(out)

    @property
    def _clamp_open(self) -> np.ndarray:
        raw = self.output[:, self.mean.shape[1]:]
        return ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)

    def log_prob(self, actions) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        z = (a - self.mean) * np.exp(-self.log_std)
        k = self.mean.shape[1]
        return -0.5 * np.sum(z * z, axis=1) - np.sum(self.log_std, axis=1) - 0.5 * k * np.log(2 * np.pi)

    def dlogp_doutput(self, actions) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions, dtype=float))
        inv = np.exp(-self.log_std)
        z = (a - self.mean) * inv
        g_mean = z * inv
        g_ls = (z * z - 1.0) * self._clamp_open
        return np.concatenate([g_mean, g_ls], axis=1)

    def entropy(self) -> np.ndarray:
        k = self.mean.shape[1]
        return np.sum(self.log_std, axis=1) + 0.5 * k * (1.0 + np.log(2 * np.pi))

    def dentropy_doutput(self) -> np.ndarray:
        return np.concatenate([np.zeros_like(self.mean), self._clamp_open], axis=1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.exp(self.log_std) * rng.standard_normal(self.mean.shape)

    def mode(self) -> np.ndarray:
        return self.mean


def log_prob(head, action) -> np.ndarray:
    return head.log_prob(action)


def kl_between_heads(a, b) -> np.ndarray:
    """Closed-form KL(a || b), one value per batch row."""
    if isinstance(a, Categorical) and isinstance(b, Categorical):
        if a.probs.shape != b.probs.shape:
            raise StructuralError("categorical heads differ in shape")
        la, lb = log_softmax(a.logits), log_softmax(b.logits)
        kl = np.sum(np.where(a.probs > 0, a.probs * (la - lb), 0.0), axis=-1)
        return np.maximum(kl, 0.0)
    if isinstance(a, DiagGaussian) and isinstance(b, DiagGaussian):
        if a.mean.shape != b.mean.shape:
            raise StructuralError("gaussian heads differ in shape")
        va, vb = np.exp(2 * a.log_std), np.exp(2 * b.log_std)
        kl = (b.log_std - a.log_std) + (va + (a.mean - b.mean) ** 2) / (2 * vb) - 0.5
        return np.maximum(np.sum(kl, axis=1), 0.0)
    raise StructuralError("kl_between_heads needs two heads of the same family")


def dkl_dsecond(a, b) -> np.ndarray:
    """Gradient of KL(a || b) w.r.t. the raw network output behind ``b``."""
    if isinstance(a, Categorical):
        return b.probs - a.probs
    va, vb = np.exp(2 * a.log_std), np.exp(2 * b.log_std)
    g_mean = (b.mean - a.mean) / vb
    g_ls = (1.0 - (va + (a.mean - b.mean) ** 2) / vb) * b._clamp_open
    return np.concatenate([g_mean, g_ls], axis=1)


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def log_sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


# ---------------------------------------------------------------- optimizers

class Sgd:
    def __init__(self, net: Network, lr: float):
        self.net, self.lr = net, lr

    def step(self, tape: GradientTape, ascend: bool = False) -> None:
        sign = 1.0 if ascend else -1.0
        for p, g in zip(self.net.params(), _tape_params(tape)):
            p += sign * self.lr * g


class Adam:
    def __init__(self, net: Network, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.net, self.lr = net, lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.t = 0

    def step(self, tape: GradientTape, ascend: bool = False) -> None:
        self.t += 1
        sign = 1.0 if ascend else -1.0
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.net.params(), _tape_params(tape), self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(net: Network, lr: float, kind: str = "sgd"):
    if kind == "sgd":
        return Sgd(net, lr)
    if kind == "adam":
        return Adam(net, lr)
    raise StructuralError(f"unknown optimizer {kind!r}")


def _tape_params(tape: GradientTape) -> list:
    return [g for pair in zip(tape.weights, tape.biases) for g in pair]


def clip_tape(tape: GradientTape, max_norm: float | None) -> tuple[GradientTape, float]:
    norm = tape.norm()
    if max_norm is not None and norm > max_norm > 0:
        return tape.scale(max_norm / norm), norm
    return tape, norm


# ---------------------------------------------------------------- checkpoints

def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def checkpoint_dict(net: Network) -> dict:
    blocks = []
    for w, b in zip(net.weights, net.biases):
        blocks.append({"w": _encode(w), "b": _encode(b)})
    body = {
        "format": "samdp-lab/diffnet",
        "version": CHECKPOINT_VERSION,
        "layer_sizes": net.layer_sizes,
        "activations": [net.activation] * (len(net.layer_sizes) - 2) + ["linear"],
        "params": blocks,
    }
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return {**body, "checksum": digest}


def network_from_dict(doc: dict) -> Network:
    if doc.get("format") != "samdp-lab/diffnet" or doc.get("version") != CHECKPOINT_VERSION:
        raise StructuralError("not a supported diffnet checkpoint")
    body = {k: v for k, v in doc.items() if k != "checksum"}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    if digest != doc.get("checksum"):
        raise StructuralError("checkpoint checksum mismatch")
    sizes = doc["layer_sizes"]
    acts = doc["activations"]
    net = Network(sizes, activation=acts[0] if len(acts) > 1 else "tanh", rng=0)
    for i, blk in enumerate(doc["params"]):
        net.weights[i] = _decode(blk["w"], (sizes[i], sizes[i + 1]))
        net.biases[i] = _decode(blk["b"], (sizes[i + 1],))
    return net


def save_checkpoint(net: Network) -> str:
    return json.dumps(checkpoint_dict(net), indent=1, sort_keys=True)


def load_checkpoint(text: str) -> Network:
    return network_from_dict(json.loads(text))
