"""Weight preparation: SGD/Adam steps, the SAM gradient, and trajectory recording."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .nn import DimensionError, gaussian_sample
from .store import OfflineTrajectory
from .tasks import Episode, QuadraticTask, classification_loss_grad, quadratic_loss_grad

log = logging.getLogger(__name__)

FLAT_GRAD_NORM = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    policy: str = "sgd"
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    sam_enabled: bool = False
    sam_rho: float = 0.05
    max_epochs: int = 50
    early_stop_patience: int = 5
    batch_size: int = 0  # 0 = full batch

    def __post_init__(self):
        if self.policy not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer policy {self.policy!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.sam_rho < 0:
            raise ValueError("sam_rho must be non-negative")
        if self.early_stop_patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


class TrajectoryDivergence(RuntimeError):
    def __init__(self, msg, prefix: OfflineTrajectory):
        super().__init__(msg)
        self.prefix = prefix


def sam_gradient(loss_grad_fn, theta, rho) -> tuple[np.ndarray, bool]:
    """Gradient at θ + ρ g/‖g‖. Returns (gradient, flat) where `flat` marks a skipped perturbation."""
    _, g = loss_grad_fn(theta)
    if rho == 0:
        return g, False
    norm = float(np.linalg.norm(g))
    if norm < FLAT_GRAD_NORM:
        return g, True
    eps = rho * g / norm
    return loss_grad_fn(theta + eps)[1], False


def optimizer_step(config: OptimizerConfig, state: OptimizerState, theta, g, step_index=None):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape:
        raise DimensionError("gradient", theta.shape, g.shape)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient at step {step_index if step_index is not None else state.t}")
    if config.policy == "sgd":
        return theta - config.learning_rate * g, replace(state, t=state.t + 1)
    t = state.t + 1
    m = np.zeros_like(theta) if state.m is None else state.m
    v = np.zeros_like(theta) if state.v is None else state.v
    m = config.beta1 * m + (1 - config.beta1) * g
    v = config.beta2 * v + (1 - config.beta2) * g * g
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    step = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return theta - step, OptimizerState(m, v, t)


def _batches(rng, n, batch_size):
    if batch_size <= 0 or batch_size >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def prepare_trajectory(task, net_spec, config: OptimizerConfig, rng, theta0=None) -> OfflineTrajectory:
    """Run the optimizer epoch by epoch and record θ_0..θ_T.

    T is fixed by early stopping on the eval loss (strict improvement, with
    `early_stop_patience` epochs of grace), capped at `max_epochs`.
    For a QuadraticTask an epoch is one full-batch step.
    """
    batch_seed = int(rng.integers(0, 2**63))
    batch_rng = np.random.Generator(np.random.Philox(batch_seed))
    if isinstance(task, QuadraticTask):
        dim = task.dim
        task_id = int(task.rotation_seed or 0)

        def epoch_batches():
            return [None]

        def loss_grad(theta, idx):
            return quadratic_loss_grad(task, theta)

        def eval_loss(theta):
            return quadratic_loss_grad(task, theta)[0]
    elif isinstance(task, Episode):
        dim = net_spec.n_params
        task_id = task.task_id
        n = task.x_train.shape[0]

        def epoch_batches():
            return _batches(batch_rng, n, config.batch_size)

        def loss_grad(theta, idx):
            return classification_loss_grad(net_spec, theta, (task.x_train[idx], task.y_train[idx]))

        def eval_loss(theta):
            return classification_loss_grad(net_spec, theta, (task.x_eval, task.y_eval))[0]
    else:
        raise TypeError(f"unsupported task type {type(task).__name__}")

    theta = gaussian_sample(rng, dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    if theta.shape != (dim,):
        raise DimensionError("theta0", (dim,), theta.shape)
    states = [theta.copy()]
    losses = [eval_loss(theta)]
    state = OptimizerState()
    best, since_best = losses[0], 0
    rho = config.sam_rho if config.sam_enabled else 0.0
    flat_steps = 0

    def partial():
        return OfflineTrajectory(task_id, config.policy, config.sam_enabled, np.array(states),
                                 np.array(losses), batch_seed)

    for epoch in range(config.max_epochs):
        for idx in epoch_batches():
            g, flat = sam_gradient(lambda th: loss_grad(th, idx), theta, rho)
            flat_steps += flat
            try:
                theta, state = optimizer_step(config, state, theta, g)
            except FloatingPointError as exc:
                raise TrajectoryDivergence(f"epoch {epoch}: {exc}", partial()) from exc
        loss = eval_loss(theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(theta))):
            raise TrajectoryDivergence(f"loss diverged at epoch {epoch + 1}", partial())
        states.append(theta.copy())
        losses.append(loss)
        if loss < best:
            best, since_best = loss, 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    if flat_steps:
        log.debug("task %d: %d flat-gradient SAM steps", task_id, flat_steps)
    return partial()


def gd_bound_check(task: QuadraticTask, theta0, T, mu=None, l=None) -> tuple[float, float, bool]:
    """Gradient descent with step 1/l against ‖θ_T-θ*‖² ≤ 2(L(θ_0)-L*)/μ · (1-μ/l)^T.

    `mu`/`l` default to the task's extreme eigenvalues; declaring looser
    constants is allowed. Iterates on the displacement θ-θ* (GD on a
    quadratic is translation-equivariant) so rounding never floors the error
    at the scale of θ*.
    """
    mu = task.mu if mu is None else float(mu)
    l = task.l if l is None else float(l)
    A = task.hessian
    d = np.asarray(theta0, dtype=np.float64) - task.optimum
    loss0 = 0.5 * float(d @ A @ d)
    for _ in range(T):
        d = d - (A @ d) / l
    lhs = float(d @ d)
    rhs = 2.0 * loss0 / mu * (1.0 - mu / l) ** T
    return lhs, rhs, lhs <= rhs * (1 + 1e-9)
