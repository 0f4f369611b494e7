"""Synthetic downstream tasks: rotated quadratics, 2D landscapes, blob episodes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import DimensionError, MlpSpec, make_rng, mlp_forward, mlp_vjp


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """L(θ) = ½ (θ-θ*)ᵀ A (θ-θ*) with A = Q diag(eigs) Qᵀ.

    `rotation_seed=None` keeps A diagonal.
    """

    hessian_eigs: np.ndarray
    optimum: np.ndarray
    rotation_seed: int | None = 0
    hessian: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        eigs = np.asarray(self.hessian_eigs, dtype=np.float64)
        opt = np.asarray(self.optimum, dtype=np.float64)
        if eigs.ndim != 1 or eigs.size == 0 or np.any(eigs <= 0):
            raise ValueError("hessian eigenvalues must be a nonempty positive vector")
        if opt.shape != eigs.shape:
            raise DimensionError("optimum", eigs.shape, opt.shape)
        object.__setattr__(self, "hessian_eigs", eigs)
        object.__setattr__(self, "optimum", opt)
        if self.rotation_seed is None:
            A = np.diag(eigs)
        else:
            Q, _ = np.linalg.qr(make_rng(self.rotation_seed).standard_normal((eigs.size, eigs.size)))
            A = (Q * eigs) @ Q.T
            A = 0.5 * (A + A.T)
        object.__setattr__(self, "hessian", A)

    @property
    def dim(self) -> int:
        return self.hessian_eigs.size

    @property
    def mu(self) -> float:
        return float(self.hessian_eigs.min())

    @property
    def l(self) -> float:
        return float(self.hessian_eigs.max())


def random_quadratic(rng, dim, max_condition=100.0, zero_optimum=False) -> QuadraticTask:
    """Eigenvalues log-uniform in [mu, mu*cond] with cond drawn from [1, max_condition]."""
    cond = float(np.exp(rng.uniform(0.0, np.log(max_condition))))
    mu = float(np.exp(rng.uniform(np.log(0.1), np.log(2.0))))
    eigs = mu * np.exp(rng.uniform(0.0, np.log(cond), size=dim))
    eigs[0] = mu
    if dim > 1:
        eigs[1] = mu * cond
    opt = np.zeros(dim) if zero_optimum else rng.standard_normal(dim)
    return QuadraticTask(eigs, opt, rotation_seed=int(rng.integers(0, 2**62)))


def quadratic_loss_grad(task: QuadraticTask, theta) -> tuple[float, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (task.dim,):
        raise DimensionError("theta", (task.dim,), theta.shape)
    d = theta - task.optimum
    g = task.hessian @ d
    return 0.5 * float(d @ g), g


@dataclass(frozen=True)
class Landscape2D:
    kind: str = "two_basin"
    a: float = 1.0
    b: float = 5.0

    def __post_init__(self):
        if self.kind not in ("two_basin", "rosenbrock_like"):
            raise ValueError(f"unknown landscape {self.kind!r}")

    def loss_grad(self, theta) -> tuple[float, np.ndarray]:
        x, y = np.asarray(theta, dtype=np.float64)
        if self.kind == "rosenbrock_like":
            f = (self.a - x) ** 2 + self.b * (y - x * x) ** 2
            gx = -2.0 * (self.a - x) - 4.0 * self.b * x * (y - x * x)
            gy = 2.0 * self.b * (y - x * x)
            return float(f), np.array([gx, gy])
        # two Gaussian wells on a weak quadratic bowl
        e1 = np.exp(-((x - 1.5) ** 2 + (y - 0.5) ** 2))
        e2 = np.exp(-((x + 1.0) ** 2 + (y + 1.0) ** 2) / 0.5)
        f = 0.05 * (x * x + y * y) - self.a * e1 - 0.8 * self.a * e2
        gx = 0.1 * x + 2 * self.a * (x - 1.5) * e1 + 0.8 * self.a * 4 * (x + 1.0) * e2
        gy = 0.1 * y + 2 * self.a * (y - 0.5) * e1 + 0.8 * self.a * 4 * (y + 1.0) * e2
        return float(f), np.array([gx, gy])


@dataclass
class Episode:
    unlabeled_x: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int
    task_id: int

    def __post_init__(self):
        if len(self.unlabeled_x) == 0:
            raise ValueError("episode needs at least one conditioning sample")
        for y in (self.y_train, self.y_eval):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError("labels outside [0, n_classes)")


def make_blob_episodes(rng, n_episodes, n_classes, dim_x, samples_per_class,
                       separation=4.0, shift_scale=1.0, jitter=0.3,
                       conditioning_samples=None) -> list[Episode]:
    """Gaussian-blob classification tasks with unit within-class spread.

    Class c sits at angle 2πc/C on a circle of radius `separation` in the first
    two input coordinates; each episode translates the whole layout by a
    random shift and jitters every mean, so tasks differ while labels stay
    identifiable from the unlabeled inputs alone.
    """
    if min(n_episodes, dim_x, samples_per_class) < 1 or n_classes < 2:
        raise ValueError("counts must be positive and n_classes >= 2")
    base = np.zeros((n_classes, dim_x))
    ang = 2 * np.pi * np.arange(n_classes) / n_classes
    base[:, 0] = separation * np.cos(ang)
    if dim_x > 1:
        base[:, 1] = separation * np.sin(ang)
    episodes = []
    for _ in range(n_episodes):
        task_id = int(rng.integers(0, 2**63))
        means = base + shift_scale * rng.standard_normal(dim_x) \
            + jitter * rng.standard_normal((n_classes, dim_x))

        def draw(per_class):
            y = np.repeat(np.arange(n_classes), per_class)
            x = means[y] + rng.standard_normal((y.size, dim_x))
            perm = rng.permutation(y.size)
            return x[perm], y[perm]

        x_tr, y_tr = draw(samples_per_class)
        x_ev, y_ev = draw(samples_per_class)
        n_cond = x_tr.shape[0] if conditioning_samples is None else conditioning_samples
        episodes.append(Episode(x_tr[:n_cond].copy(), x_tr, y_tr, x_ev, y_ev, n_classes, task_id))
    return episodes


def _softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return float(loss), d / n


def classification_loss_grad(spec: MlpSpec, theta, batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the MLP logits over (x, y), and its parameter gradient."""
    x, y = batch
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= spec.n_out):
        raise ValueError(f"labels must lie in [0, {spec.n_out})")
    logits = mlp_forward(spec, theta, x)
    loss, dlogits = _softmax_xent(logits, y)
    grad, _ = mlp_vjp(spec, theta, x, dlogits)
    return loss, grad


def classification_loss(spec, theta, x, y) -> float:
    logits = mlp_forward(spec, theta, x)
    return _softmax_xent(logits, np.asarray(y))[0]


def accuracy(spec, theta, x, y) -> float:
    logits = mlp_forward(spec, theta, x)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def task_conditioning(task) -> np.ndarray:
    """The unlabeled set a policy conditions on.

    Episodes expose their unlabeled inputs. A quadratic has no data, so it is
    described by the rows [A_i, (Aθ*)_i], which pin down the loss up to a constant.
    """
    if isinstance(task, Episode):
        return np.asarray(task.unlabeled_x, dtype=np.float64)
    if isinstance(task, QuadraticTask):
        return np.column_stack([task.hessian, task.hessian @ task.optimum])
    raise TypeError(f"unsupported task type {type(task).__name__}")


def task_eval_loss(task, net_spec, theta) -> float:
    """Held-out loss used for reporting (the loss itself for a quadratic)."""
    if isinstance(task, QuadraticTask):
        return quadratic_loss_grad(task, theta)[0]
    return classification_loss(net_spec, theta, task.x_eval, task.y_eval)
