"""Dense networks with hand-rolled reverse-mode gradients and Adam.

Everything here is plain float64 numpy. Networks are value-like: `clone()`
gives an independent copy, and `forward` is a pure function of
(parameters, input). Inputs may be a single vector ``(in,)`` or a batch
``(B, in)``; parameter gradients are summed over the batch, so callers that
want a mean-reduced loss fold the ``1/B`` factor into ``upstream``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError

CHECKPOINT_FORMAT_VERSION = 1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


_ACTIVATIONS = {
    "gelu": (_gelu, _gelu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
}


@dataclass
class DenseNet:
    """MLP with hidden activations and a linear output layer.

    weights[k] has shape (layer_sizes[k], layer_sizes[k+1]); the activation is
    applied after every layer except the last.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if any(n <= 0 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ValueError(f"layer {k}: parameter shapes {w.shape}/{b.shape} do not chain {want}")

    @classmethod
    def create(cls, layer_sizes, activation="gelu", rng=None):
        """Seedable init: W ~ U(+-1/sqrt(fan_in)), zero biases."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_sizes), weights, biases, activation)

    @property
    def in_size(self):
        return self.layer_sizes[0]

    @property
    def out_size(self):
        return self.layer_sizes[-1]

    def clone(self):
        return DenseNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def to_dict(self):
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data):
        version = data.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version: {version!r}")
        sizes = list(data["layer_sizes"])
        weights = [
            np.asarray(flat, dtype=np.float64).reshape(sizes[k], sizes[k + 1])
            for k, flat in enumerate(data["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        return cls(sizes, weights, biases, data["activation"])


@dataclass
class GradientTape:
    """Parameter gradients mirroring DenseNet shapes plus the input gradient."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the network on a vector (in,) or batch (B, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_size:
        raise ValueError(f"input size {x.shape[-1]} != expected {net.in_size}")
    act, _ = _ACTIVATIONS[net.activation]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k != last:
            h = act(h)
    return h


def backward(net: DenseNet, x, upstream) -> GradientTape:
    """Vector-Jacobian product: gradients of <upstream, net(x)> in params and x."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    ub = upstream[None, :] if single else upstream
    if ub.shape != (xb.shape[0], net.out_size):
        raise ValueError(f"upstream shape {upstream.shape} does not match output size {net.out_size}")

    act, act_grad = _ACTIVATIONS[net.activation]
    last = len(net.weights) - 1
    pre = []  # pre-activation per layer
    post = [xb]  # layer inputs
    h = xb
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        h = act(z) if k != last else z
        if k != last:
            post.append(h)

    d_weights = [None] * len(net.weights)
    d_biases = [None] * len(net.biases)
    delta = ub
    for k in range(last, -1, -1):
        d_weights[k] = post[k].T @ delta
        d_biases[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k].T
        if k > 0:
            delta = delta * act_grad(pre[k - 1])
    if not np.isfinite(delta).all():
        raise NumericError("non-finite intermediate in backward pass")
    d_input = delta[0] if single else delta
    return GradientTape(d_weights, d_biases, d_input)


@dataclass
class AdamState:
    """Bias-corrected adaptive-moment state for one DenseNet."""

    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate=3e-4):
        return cls(
            learning_rate=learning_rate,
            m_w=[np.zeros_like(w) for w in net.weights],
            v_w=[np.zeros_like(w) for w in net.weights],
            m_b=[np.zeros_like(b) for b in net.biases],
            v_b=[np.zeros_like(b) for b in net.biases],
        )


def adam_step(net: DenseNet, tape: GradientTape, state: AdamState):
    """One Adam update in place; returns (net, state) for chaining."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    scale = state.learning_rate * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for params, grads, ms, vs in (
        (net.weights, tape.d_weights, state.m_w, state.v_w),
        (net.biases, tape.d_biases, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(params, grads, ms, vs):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            with np.errstate(invalid="ignore", over="ignore"):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= scale * m / (np.sqrt(v) + state.eps)
            if not np.isfinite(p).all():
                raise NumericError("non-finite parameter after optimizer step")
    return net, state


def clip_gradients(tape: GradientTape, max_norm: float) -> float:
    """Global-norm gradient clipping in place; returns the pre-clip norm."""
    sq = sum(float(np.sum(g * g)) for g in tape.d_weights + tape.d_biases)
    norm = np.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in tape.d_weights + tape.d_biases:
            g *= factor
    return norm


def save_net(net: DenseNet, path):
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh)


def load_net(path) -> DenseNet:
    with open(path) as fh:
        return DenseNet.from_dict(json.load(fh))
