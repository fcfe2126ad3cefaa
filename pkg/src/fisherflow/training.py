"""Primal-dual refinement training.

The loop interleaves: (1) TD critic updates with a double-critic pessimistic
target, (2) flow-matching updates of the behavioral velocity field, (3) one
ascent step on the residual transport map against the Lagrangian
Q - lambda * (penalty - epsilon), and (4) a projected dual update. The
default synthetic protocol is a bandit: gamma = 0 with an analytic value
landscape, which freezes steps (1)-(2) after pretraining and isolates the
metric choice (fisher vs isotropic) that the ablations compare.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .errors import NumericError
from .flow import FlowPolicy, FlowTrainConfig, VelocityField, flow_matching_loss, train_flow
from .score import (batched_scores, damped_inverse_apply, fisher_matrix,
                    fisher_penalty_batch, isotropic_metric)
from .tasks import OfflineDataset, SyntheticTask
from .transport import TransportMap


@dataclass
class Critic:
    """Double critic with target-network trails (pessimistic min combiner)."""

    online: tuple
    target: tuple
    adams: tuple
    tau: float = 0.005
    gamma: float = 0.99

    @classmethod
    def create(cls, state_dim, action_dim, hidden=(64, 64), learning_rate=3e-4,
               tau=0.005, gamma=0.99, activation="gelu", rng=None):
        rng = np.random.default_rng(rng)
        sizes = [state_dim + action_dim, *hidden, 1]
        online = tuple(nets.DenseNet.create(sizes, activation, rng) for _ in range(2))
        target = tuple(net.clone() for net in online)
        adams = tuple(nets.AdamState.for_net(net, learning_rate) for net in online)
        return cls(online, target, adams, tau, gamma)

    @staticmethod
    def _stack(s, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if s is None or (hasattr(s, "shape") and np.asarray(s).shape[-1] == 0):
            return a
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 1:
            s = np.broadcast_to(s, (a.shape[0], s.shape[0]))
        return np.concatenate([s, a], axis=1)

    def values(self, s, a):
        """Per-net online values, shape (2, B)."""
        x = self._stack(s, a)
        return np.stack([nets.forward(net, x)[:, 0] for net in self.online])

    def value(self, s, a):
        return self.values(s, a).min(axis=0)

    def target_values(self, s, a):
        x = self._stack(s, a)
        return np.stack([nets.forward(net, x)[:, 0] for net in self.target])

    def value_and_action_grad(self, s, a):
        """Pessimistic value and its gradient in the action (per sample)."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        x = self._stack(s, a)
        outs = [nets.forward(net, x)[:, 0] for net in self.online]
        n_state = x.shape[1] - a.shape[1]
        upstream = np.ones((x.shape[0], 1))
        grads = [nets.backward(net, x, upstream).d_input[:, n_state:] for net in self.online]
        first_wins = (outs[0] <= outs[1])[:, None]
        return np.minimum(*outs), np.where(first_wins, grads[0], grads[1])

    def soft_update(self):
        for online, target in zip(self.online, self.target):
            for po, pt in zip(online.parameters(), target.parameters()):
                pt *= 1.0 - self.tau
                pt += self.tau * po


@dataclass(frozen=True)
class DualState:
    """Projected Lagrange multiplier for the trust-region constraint."""

    lam: float = 10.0
    epsilon: float = 0.1
    eta: float = 1e-3
    use_log: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def dual_update(dual: DualState, constraint_value: float) -> DualState:
    """lambda <- relu(lambda + eta (constraint - epsilon)); log-space variant optional."""
    violation = float(constraint_value) - dual.epsilon
    if dual.use_log:
        lam = dual.lam * float(np.exp(dual.eta * violation))
    else:
        lam = max(0.0, dual.lam + dual.eta * violation)
    return replace(dual, lam=lam)


class FisherMetricSource:
    """Per-sample rank-1 metric estimated from the flow's perturbed score."""

    def __init__(self, velocity_field, t_eps=0.8, normalize=True, damping=1e-3):
        self.field = velocity_field
        self.t_eps = float(t_eps)
        self.normalize = bool(normalize)
        self.damping = float(damping)

    def penalty_and_grad(self, s, base_actions, deltas):
        scores = batched_scores(self.field, s, base_actions, self.t_eps)
        return fisher_penalty_batch(scores, deltas, self.normalize, self.damping)

    def metric_at(self, s, a):
        scores = batched_scores(self.field, s, np.atleast_2d(a), self.t_eps)
        return fisher_matrix(scores[0], normalize=self.normalize, damping=self.damping)


class IsotropicMetricSource:
    """Identity metric: the L2 baseline arm with the same interfaces."""

    def __init__(self, action_dim):
        self.action_dim = int(action_dim)

    def penalty_and_grad(self, s, base_actions, deltas):
        deltas = np.atleast_2d(deltas)
        return 0.5 * np.sum(deltas * deltas, axis=1), deltas.copy()

    def metric_at(self, s, a):
        return isotropic_metric(self.action_dim)


class AnalyticQSource:
    """Ground-truth landscape values and exact gradients from a synthetic task."""

    def __init__(self, task: SyntheticTask):
        self.task = task

    def value_and_grad(self, s, a):
        return self.task.q_value(s, a)


class CriticQSource:
    def __init__(self, critic: Critic):
        self.critic = critic

    def value_and_grad(self, s, a):
        return self.critic.value_and_action_grad(s, a)


@dataclass(frozen=True)
class ActorStats:
    objective: float
    mean_q: float
    constraint: float


def actor_update(tmap: TransportMap, q_source, metric_source, dual: DualState,
                 states, rng, adam: nets.AdamState, q_normalization=True,
                 grad_clip=5.0) -> ActorStats:
    """One ascent step on the residual net against the Lagrangian.

    The base action comes from the frozen flow (no gradients reach the
    velocity field); the metric is evaluated at the base action. Q values
    are normalized by their batch mean absolute value when enabled.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    b = states.shape[0]
    d = tmap.action_dim
    z = rng.standard_normal((b, d))
    base = tmap.base_policy.sample(states, z)
    delta = tmap.residual(states, base)
    refined = base + delta
    q, dq = q_source.value_and_grad(states, refined)
    q = np.atleast_1d(q)
    scale = 1.0 / max(float(np.mean(np.abs(q))), 1e-8) if q_normalization else 1.0
    pen, pen_grad = metric_source.penalty_and_grad(states, base, delta)
    constraint = float(pen.mean())
    objective = scale * float(q.mean()) - dual.lam * (constraint - dual.epsilon)
    # ascent on the objective = descent on its negation
    upstream = -(scale * dq - dual.lam * pen_grad) / b
    tape, _ = tmap.residual_backward(states, base, upstream)
    nets.clip_gradients(tape, grad_clip)
    nets.adam_step(tmap.residual_net, tape, adam)
    return ActorStats(objective, float(q.mean()), constraint)


def critic_update(critic: Critic, tmap: TransportMap, batch, rng, grad_clip=5.0) -> float:
    """TD step: target r + gamma * min of the target critics at the refined next action."""
    states, actions, rewards, next_states = batch
    actions = np.atleast_2d(actions)
    b = actions.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    rewards = np.asarray(rewards, dtype=np.float64)
    if critic.gamma > 0.0 and next_states is not None:
        z = rng.standard_normal((b, tmap.action_dim))
        base = tmap.base_policy.sample(next_states, z)
        next_actions = base + tmap.residual(next_states, base)
        target = rewards + critic.gamma * critic.target_values(next_states, next_actions).min(axis=0)
    else:
        target = rewards
    if not np.isfinite(target).all():
        raise NumericError("non-finite TD target")
    x = critic._stack(states, actions)
    total = 0.0
    for net, adam in zip(critic.online, critic.adams):
        pred = nets.forward(net, x)[:, 0]
        resid = pred - target
        total += float(np.mean(resid**2))
        tape = nets.backward(net, x, (2.0 / b) * resid[:, None])
        nets.clip_gradients(tape, grad_clip)
        nets.adam_step(net, tape, adam)
    critic.soft_update()
    return total / 2.0


def closed_form_refine(q_source, metric, dual, s, a) -> np.ndarray:
    """Pointwise natural-gradient displacement (1/lambda) M^-1 grad_a Q."""
    lam = dual.lam if isinstance(dual, DualState) else float(dual)
    if lam <= 0.0:
        raise ValueError("closed-form refinement requires lambda > 0")
    _, grad = q_source.value_and_grad(s, np.asarray(a, dtype=np.float64))
    grad = np.atleast_2d(grad)[0]
    return damped_inverse_apply(metric, grad) / lam


@dataclass(frozen=True)
class GapResult:
    direct: float
    eigen: float

    @property
    def value(self):
        return self.direct


def optimality_gap(metric, g, lam) -> GapResult:
    """Value gap (g^T M^-1 g - g^T g) / (2 lambda) of the isotropic surrogate.

    Computed both directly and through the eigendecomposition
    sum_i (u_i^T g)^2 (1/lambda_i - 1) / (2 lambda); the two must agree to
    1e-8 or the metric was too ill-conditioned to trust.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    g = np.asarray(g, dtype=np.float64)
    x = damped_inverse_apply(metric, g)
    direct = (float(g @ x) - float(g @ g)) / (2.0 * lam)
    eigvals, eigvecs = np.linalg.eigh(metric.matrix)
    if np.any(eigvals <= 0):
        raise NumericError("singular metric in optimality gap")
    proj = eigvecs.T @ g
    eigen = float(np.sum(proj**2 * (1.0 / eigvals - 1.0)) / (2.0 * lam))
    if abs(direct - eigen) > 1e-8 * max(1.0, abs(direct)):
        raise NumericError("optimality gap forms disagree beyond 1e-8")
    return GapResult(direct, eigen)


def iterate_quadratic_refine(metric, g, lam, max_steps=200_000, tol=1e-14) -> np.ndarray:
    """Fixed point of plain ascent on g^T d - (lambda/2) d^T M d.

    This is the actor update specialized to an exact quadratic surrogate with
    a free displacement vector; it converges to the closed-form solution and
    serves as its independent check.
    """
    g = np.asarray(g, dtype=np.float64)
    lam_max = float(np.linalg.eigvalsh(metric.matrix).max())
    step = 1.0 / (lam * lam_max + 1e-12)
    d = np.zeros_like(g)
    for _ in range(max_steps):
        grad = g - lam * (metric.matrix @ d)
        d = d + step * grad
        if np.linalg.norm(grad) < tol:
            break
    return d


@dataclass
class RefineConfig:
    """Everything a refinement run needs; fully determined by its fields."""

    seed: int = 0
    steps: int = 3000
    flow_steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 3e-4
    grad_clip: float = 5.0
    hidden: tuple = (64, 64)
    flow_integration_steps: int = 10
    activation: str = "gelu"
    max_displacement: float = 1.0
    metric: str = "fisher"            # "fisher" | "isotropic"
    t_eps: float = 0.8
    normalize_metric: bool = True
    damping: float = 1e-3
    epsilon: float = 0.1
    eta: float = 1e-3
    lambda_init: float = 10.0
    dual_log: bool = False
    q_normalization: bool = True
    mode: str = "bandit"              # "bandit" (gamma = 0) | "td"
    analytic_q: bool = True
    gamma: float = 0.99
    tau: float = 0.005
    log_interval: int = 100
    eval_samples: int = 2000

    def __post_init__(self):
        if self.metric not in ("fisher", "isotropic"):
            raise ValueError(f"unknown metric kind {self.metric!r}")
        if self.mode not in ("bandit", "td"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.hidden = tuple(self.hidden)


@dataclass
class RunResult:
    transport_map: TransportMap
    policy: FlowPolicy
    critic: Critic | None
    dual: DualState
    log: list
    final: dict
    flow_loss_curve: np.ndarray | None = field(repr=False, default=None)


def evaluate_policy(tmap: TransportMap, task: SyntheticTask, count, rng):
    """Ground-truth mean landscape value of refined and base samples."""
    states = task.sample_states(rng, count)
    z = rng.standard_normal((count, tmap.action_dim))
    base = tmap.base_policy.sample(states, z)
    refined = base + tmap.residual(states, base)
    v_refined, _ = task.q_value(states, refined)
    v_base, _ = task.q_value(states, base)
    return float(np.mean(v_refined)), float(np.mean(v_base))


def run_refinement(config: RefineConfig, dataset: OfflineDataset, task: SyntheticTask) -> RunResult:
    """Full training pipeline; deterministic given config.seed.

    Any numeric failure aborts with the offending step index attached.
    """
    if dataset.action_dim != task.action_dim or dataset.state_dim != task.state_dim:
        raise ValueError("dataset and task dimensions disagree")
    seq = np.random.SeedSequence(config.seed)
    rng_flow_init, rng_flow, rng_res, rng_critic, rng_loop, rng_eval = (
        np.random.default_rng(s) for s in seq.spawn(6))

    n, d = task.state_dim, task.action_dim
    gamma = 0.0 if config.mode == "bandit" else config.gamma
    policy = FlowPolicy(
        VelocityField.create(n, d, config.hidden, config.activation, rng_flow_init),
        steps=config.flow_integration_steps)
    flow_curve = np.zeros(0)
    if config.flow_steps > 0:
        flow_curve = train_flow(
            policy, dataset.states, dataset.actions,
            FlowTrainConfig(config.flow_steps, config.batch_size,
                            config.learning_rate, config.grad_clip), rng_flow)
    tmap = TransportMap.create(n, d, policy, config.hidden, config.activation,
                               config.max_displacement, rng_res)

    critic = None
    if config.analytic_q:
        q_source = AnalyticQSource(task)
    else:
        critic = Critic.create(n, d, config.hidden, config.learning_rate,
                               config.tau, gamma, config.activation, rng_critic)
        q_source = CriticQSource(critic)
    if config.metric == "fisher":
        metric_source = FisherMetricSource(policy.field, config.t_eps,
                                           config.normalize_metric, config.damping)
    else:
        metric_source = IsotropicMetricSource(d)
    dual = DualState(config.lambda_init, config.epsilon, config.eta, config.dual_log)
    actor_adam = nets.AdamState.for_net(tmap.residual_net, config.learning_rate)
    flow_adam = nets.AdamState.for_net(policy.field.net, config.learning_rate)

    rows = []
    size = len(dataset)
    flow_loss = float(flow_curve[-1]) if flow_curve.size else float("nan")
    td_loss = 0.0
    stats = ActorStats(0.0, 0.0, 0.0)
    for step in range(config.steps):
        try:
            idx = rng_loop.integers(0, size, size=min(config.batch_size, size))
            states = dataset.states[idx]
            if critic is not None:
                batch = (states, dataset.actions[idx],
                         dataset.rewards[idx] if dataset.rewards is not None else np.zeros(len(idx)),
                         dataset.next_states[idx] if dataset.next_states is not None else None)
                td_loss = critic_update(critic, tmap, batch, rng_loop, config.grad_clip)
                loss, tape = flow_matching_loss(policy.field, states, dataset.actions[idx], rng_loop)
                nets.clip_gradients(tape, config.grad_clip)
                nets.adam_step(policy.field.net, tape, flow_adam)
                flow_loss = loss
            stats = actor_update(tmap, q_source, metric_source, dual, states, rng_loop,
                                 actor_adam, config.q_normalization, config.grad_clip)
            dual = dual_update(dual, stats.constraint)
        except NumericError as exc:
            raise NumericError(f"training step {step}: {exc}") from exc
        if config.log_interval and (step % config.log_interval == 0 or step == config.steps - 1):
            rows.append({"step": step, "flow_loss": float(flow_loss), "td_loss": float(td_loss),
                         "mean_q": stats.mean_q, "constraint": stats.constraint,
                         "lambda": dual.lam})

    mean_refined, mean_base = evaluate_policy(tmap, task, config.eval_samples, rng_eval)
    final = {
        "mean_refined_value": mean_refined,
        "mean_base_value": mean_base,
        "final_constraint": stats.constraint,
        "final_lambda": dual.lam,
        "flow_loss": float(flow_loss),
        "td_loss": float(td_loss),
    }
    return RunResult(tmap, policy, critic, dual, rows, final, flow_curve)
