"""Conditional flow-matching behavioral policy.

The velocity net takes (state, interpolant, time) concatenated and returns a
velocity in action space. Sampling is fixed-grid explicit Euler from noise,
matching the training-time linear interpolation path. An analytic
Gaussian-target velocity is provided as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .densities import GaussianMixture
from .errors import NumericError


@dataclass
class VelocityField:
    """Trainable velocity net v(t, s, a) with input size n + d + 1."""

    net: nets.DenseNet
    state_dim: int
    action_dim: int

    @classmethod
    def create(cls, state_dim, action_dim, hidden=(64, 64), activation="gelu", rng=None):
        sizes = [state_dim + action_dim + 1, *hidden, action_dim]
        return cls(nets.DenseNet.create(sizes, activation, rng), state_dim, action_dim)

    def assemble_input(self, t, s, a):
        a = np.asarray(a, dtype=np.float64)
        s = _match_state(s, a, self.state_dim)
        if a.ndim == 1:
            return np.concatenate([s, a, [float(t)]])
        tt = np.full((a.shape[0], 1), float(t))
        return np.concatenate([s, a, tt], axis=1)

    def __call__(self, t, s, a):
        return nets.forward(self.net, self.assemble_input(t, s, a))

    def clone(self):
        return VelocityField(self.net.clone(), self.state_dim, self.action_dim)


@dataclass
class FlowPolicy:
    """Euler sampler over a velocity field; `steps` is the integration grid size."""

    field: VelocityField
    steps: int = 10
    bounds: tuple | None = None  # optional per-coordinate (lo, hi) clamp

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def sample(self, s, z):
        return sample_action(self, s, z)


def sample_action(policy: FlowPolicy, s, z) -> np.ndarray:
    """Integrate dz/dt = v(t, s, z) with M explicit Euler steps from t = 0.

    Deterministic given (parameters, s, z). Accepts a single noise vector
    (d,) or a batch (B, d).
    """
    z = np.array(z, dtype=np.float64)
    m = policy.steps
    for k in range(m):
        v = policy.field(k / m, s, z)
        z = z + v / m
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite action trajectory at Euler step {k}")
    if policy.bounds is not None:
        lo, hi = policy.bounds
        z = np.clip(z, lo, hi)
    return z


@dataclass(frozen=True)
class InterpolantSample:
    """One point on the linear noise-to-data path: xt = (1 - t) x0 + t x1."""

    t: float
    x0: np.ndarray
    x1: np.ndarray
    xt: np.ndarray

    @property
    def regression_target(self):
        return self.x1 - self.x0


def make_interpolant(t, x0, x1) -> InterpolantSample:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError("interpolation time must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    return InterpolantSample(t, x0, x1, (1.0 - t) * x0 + t * x1)


def gaussian_oracle_velocity(mu, sigma, t, a) -> np.ndarray:
    """Exact conditional-expectation velocity for an isotropic Gaussian target.

    For target N(mu, sigma^2 I) under the linear path, the time-t marginal is
    N(t mu, (t^2 sigma^2 + (1-t)^2) I) and E[x1 | x_t] is the usual jointly
    Gaussian conditioning, so the velocity (E[x1 | x_t] - x_t)/(1 - t) is
    available in closed form. Rejected at t = 1 where the marginal degenerates.
    """
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1); the path degenerates at t = 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    m_t = t * t * sigma * sigma + (1.0 - t) ** 2
    posterior = mu + t * sigma * sigma * (a - t * mu) / m_t
    return (posterior - a) / (1.0 - t)


class GaussianOracleField:
    """gaussian_oracle_velocity wrapped with the (t, s, a) field call shape."""

    def __init__(self, mu, sigma):
        self.mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        self.sigma = float(sigma)
        self.action_dim = self.mu.size

    def __call__(self, t, s, a):
        return gaussian_oracle_velocity(self.mu, self.sigma, t, a)


def flow_matching_loss(field: VelocityField, states, actions, rng):
    """Sampled conditional flow-matching loss and its parameter gradients.

    Per batch row draws t ~ U[0,1] and x0 ~ N(0, I_d), regresses
    v(t, s, x_t) onto (x1 - x0) at x_t = (1-t) x0 + t x1, and returns the
    batch-mean squared error together with a GradientTape for the net.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if actions.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.isfinite(actions).all():
        raise ValueError("actions must be finite")
    b, d = actions.shape
    states = _match_state(states, actions, field.state_dim)
    t = rng.uniform(0.0, 1.0, size=(b, 1))
    x0 = rng.standard_normal((b, d))
    xt = (1.0 - t) * x0 + t * actions
    target = actions - x0
    inp = np.concatenate([states, xt, t], axis=1)
    pred = nets.forward(field.net, inp)
    resid = pred - target
    loss = float(np.sum(resid * resid) / b)
    tape = nets.backward(field.net, inp, (2.0 / b) * resid)
    return loss, tape


@dataclass
class FlowTrainConfig:
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 3e-4
    grad_clip: float = 5.0
    # the sampled regression target has large irreducible variance, so raw
    # SGD iterates bounce around the optimum; a weight average fixes that
    ema_decay: float = 0.999


def train_flow(policy: FlowPolicy, states, actions, config: FlowTrainConfig, rng) -> np.ndarray:
    """Train the policy's velocity field in place; returns the loss curve.

    Keeps an exponential moving average of the weights (when ema_decay > 0)
    and installs it at the end. Raises NumericError if the loss goes
    non-finite; the loss curve of a healthy run trends down (median of the
    last tenth below the first tenth).
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    n = actions.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    states = _match_state(states, actions, policy.field.state_dim)
    net = policy.field.net
    adam = nets.AdamState.for_net(net, config.learning_rate)
    shadow = [p.copy() for p in net.parameters()] if config.ema_decay > 0 else None
    curve = np.empty(config.steps)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        loss, tape = flow_matching_loss(policy.field, states[idx], actions[idx], rng)
        if not np.isfinite(loss):
            raise NumericError(f"flow loss diverged at step {step}")
        nets.clip_gradients(tape, config.grad_clip)
        nets.adam_step(net, tape, adam)
        if shadow is not None:
            # warm up the average fast, then settle at the configured decay
            decay = min(config.ema_decay, (step + 1.0) / (step + 10.0))
            for avg, p in zip(shadow, net.parameters()):
                avg *= decay
                avg += (1.0 - decay) * p
        curve[step] = loss
    if shadow is not None:
        for p, avg in zip(net.parameters(), shadow):
            p[:] = avg
    return curve


def behavioral_dataset(mixture: GaussianMixture, count, rng):
    """Stateless (s, a) pairs from a mixture target, for quick flow fitting."""
    actions = mixture.sample(rng, count)
    return np.zeros((count, 0)), actions


def _match_state(s, a, state_dim):
    """Broadcast a state vector/batch against an action vector/batch."""
    a = np.asarray(a, dtype=np.float64)
    if s is None:
        s = np.zeros(state_dim)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1 and a.ndim == 2:
        s = np.broadcast_to(s, (a.shape[0], state_dim)).copy() if state_dim else np.zeros((a.shape[0], 0))
    if s.ndim == 2 and s.shape[0] != a.shape[0]:
        raise ValueError("state batch does not match action batch")
    if s.shape[-1] != state_dim:
        raise ValueError(f"state dimension {s.shape[-1]} != expected {state_dim}")
    return s
