"""Policy training loop (lo_hp / lo_op) and the end-to-end hypernetwork baseline."""
from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .nn import MlpSpec, mlp_forward_with_cache, mlp_vjp_from_cache
from .optimizers import OptimizerConfig, OptimizerState, optimizer_step
from .policy import OnlineTrajectory, PolicyModel, canonical_x
from .store import SubTrajectorySample
from .subtb import (SegmentBatch, hybrid_loss_batch, segment_residuals, vanilla_loss_batch)
from .tasks import classification_loss_grad

log = logging.getLogger(__name__)

MODES = ("lo_hp", "lo_op", "hypernet_baseline")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.001
    epochs: int = 6000  # optimisation steps on φ
    k: int = 2
    batch_size: int = 16
    mode: str = "lo_hp"
    optimizer: str = "sgd"  # update rule for φ: sgd | adam
    estimator: str = "pathwise"
    grad_clip: float = 0.0  # global-norm clip, 0 = off
    reward_scale: float = 1.0  # β in log R = -β‖s - θ‖²
    fixed_source: bool = True  # log P^B(s_0 | s_1) = 0; False scores it with the backward head
    log_every: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.k < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("alpha > 0, k >= 1, epochs >= 0, batch_size >= 1 required")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, phi):
        super().__init__(msg)
        self.phi = phi


def _rows_for(samples, k, rng, mode, finals, reward_scale=1.0, fixed_source=True):
    """Build one minibatch. Draws fresh noise for every row (a new online rollout)."""
    B = len(samples)
    D = samples[0].dim
    Ns = np.array([s.T // k for s in samples])
    if mode == "lo_hp":
        m = np.array([s.m // k for s in samples])
        n = np.array([s.n // k for s in samples])
        target = np.array([s.theta_n for s in samples])
        start_r = end_h = end_r = np.ones(B)
    else:
        # on-policy segments anywhere on [0, N]; only the terminal state is rewarded (θ_T)
        m = np.empty(B, dtype=int)
        n = np.empty(B, dtype=int)
        for i, N in enumerate(Ns):
            a, b = sorted(rng.choice(N + 1, size=2, replace=False))
            m[i], n[i] = a, b
        target = np.array([finals[trajectory_key(s)] for s in samples])
        terminal = (n == Ns).astype(float)
        start_r, end_h, end_r = np.zeros(B), 1.0 - terminal, terminal
    L = int(n.max())
    noise = rng.standard_normal((B, L, D))
    X = np.array([canonical_x(s.conditioning) for s in samples])
    s0 = np.array([s.theta_0 for s in samples])
    return SegmentBatch(s0, noise, Ns, m, n, target, start_r, end_h, end_r, X, reward_scale=reward_scale,
                        fixed_source=fixed_source)


def trajectory_key(sample):
    """Samples of one offline trajectory share task_id and the start state θ_0."""
    return sample.task_id, np.ascontiguousarray(sample.theta_0, dtype="<f8").tobytes()


def terminal_targets(samples) -> dict:
    """θ_T per trajectory, read from full-span (n == T) samples."""
    finals = {}
    for s in samples:
        if s.n == s.T:
            finals[trajectory_key(s)] = s.theta_n
    return finals


def train_policy(samples: list[SubTrajectorySample], model: PolicyModel, config: TrainConfig, rng,
                 phi=None):
    """Algorithm-2 style loop: pick offline segments, roll out online from θ_0, match, step φ.

    Returns (φ, report). The report holds the per-step loss curve and the
    count of full-span rows on which the segment composition check ran.
    """
    if config.mode == "hypernet_baseline":
        raise ValueError("use train_hypernet for the hypernet baseline")
    if not samples:
        raise ValueError("empty store")
    for s in samples:
        if s.m % config.k or s.n % config.k or s.T % config.k:
            raise ValueError(f"sample (m={s.m}, n={s.n}, T={s.T}) not aligned to k={config.k}")
    finals = terminal_targets(samples)
    pool = samples
    if config.mode == "lo_op":
        pool = [s for s in samples if trajectory_key(s) in finals]
        if not pool:
            raise ValueError("lo_op needs full-span samples carrying θ_T")
    phi = model.init(rng) if phi is None else np.array(phi, dtype=np.float64)
    opt_cfg = OptimizerConfig(policy=config.optimizer, learning_rate=config.alpha)
    opt_state = OptimizerState()
    loss_fn = hybrid_loss_batch if config.mode == "lo_hp" else vanilla_loss_batch
    curve = []
    composition = {"checked": 0, "violations": 0, "max_telescoping_error": 0.0}
    t0 = time.perf_counter()
    for step in range(config.epochs):
        idx = rng.integers(len(pool), size=config.batch_size)
        batch_samples = [pool[i] for i in idx]
        batch = _rows_for(batch_samples, config.k, rng, config.mode, finals, config.reward_scale,
                          config.fixed_source)
        try:
            loss, grad, terms = loss_fn(model, phi, batch, config.estimator)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", phi) from exc
        if config.mode == "lo_hp":
            _composition_check(terms, batch, composition)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite gradient at step {step}", phi)
        if config.grad_clip > 0:
            norm = float(np.linalg.norm(grad))
            if norm > config.grad_clip:
                grad = grad * (config.grad_clip / norm)
        phi, opt_state = optimizer_step(opt_cfg, opt_state, phi, grad, step)
        curve.append(loss)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    report = {
        "mode": config.mode,
        "config": asdict(config),
        "loss_curve": curve,
        "composition": composition,
        "wall_time_s": time.perf_counter() - t0,
    }
    return phi, report


def _composition_check(terms, batch, acc):
    """|Σ g_i| ≤ Σ |g_i| over unit online segments of every full-span row."""
    full = np.flatnonzero((batch.m_on == 0) & (batch.n_on == batch.N))
    for row in full:
        g = segment_residuals(terms, row, np.arange(0, batch.N[row] + 1))
        acc["checked"] += 1
        if abs(np.sum(g)) > np.sum(np.abs(g)):
            acc["violations"] += 1
        err = abs(np.sum(g) - terms.r[row]) / max(1.0, abs(terms.r[row]))
        acc["max_telescoping_error"] = max(acc["max_telescoping_error"], float(err))


def online_trajectory_from_batch(terms, batch, row) -> OnlineTrajectory:
    n = batch.n_on[row]
    return OnlineTrajectory(terms.states[row, :n + 1], terms.log_pf[row, :n], terms.log_pb[row, :n],
                            batch.noise[row, :n])


# -- end-to-end baseline ---------------------------------------------------------

class Hypernet:
    """θ = G(mean_i E(x_i)): one-shot weight prediction from the unlabeled set."""

    def __init__(self, x_dim, state_dim, embed_dim=8, hidden=64):
        self.enc = MlpSpec((x_dim, 16, embed_dim), "tanh")
        self.gen = MlpSpec((embed_dim, hidden, state_dim), "tanh")
        self.n_enc = self.enc.n_params
        self.n_params = self.n_enc + self.gen.n_params

    def init(self, rng):
        parts = []
        for spec in (self.enc, self.gen):
            parts.append(spec.flatten([(rng.standard_normal((a, b)) / np.sqrt(a), np.zeros(b))
                                       for a, b in zip(spec.layer_widths[:-1], spec.layer_widths[1:])]))
        return np.concatenate(parts)

    def generate(self, psi, x, with_cache=False):
        x = canonical_x(x)
        e, ec = mlp_forward_with_cache(self.enc, psi[:self.n_enc], x)
        emb = e.mean(axis=0, keepdims=True)
        theta, gc = mlp_forward_with_cache(self.gen, psi[self.n_enc:], emb)
        if with_cache:
            return theta[0], (ec, gc, x.shape[0])
        return theta[0]

    def backward(self, cache, d_theta):
        ec, gc, n = cache
        dg, d_emb = mlp_vjp_from_cache(self.gen, gc, d_theta[None])
        de, _ = mlp_vjp_from_cache(self.enc, ec, np.repeat(d_emb / n, n, axis=0))
        return np.concatenate([de, dg])


def train_hypernet(episodes, net_spec: MlpSpec, config: TrainConfig, rng, embed_dim=8, hidden=64):
    """Minimise the downstream loss of G_ψ(x) directly, averaged over a minibatch of episodes."""
    x_dim = episodes[0].x_train.shape[1]
    net = Hypernet(x_dim, net_spec.n_params, embed_dim, hidden)
    psi = net.init(rng)
    opt_cfg = OptimizerConfig(policy=config.optimizer, learning_rate=config.alpha)
    state = OptimizerState()
    curve = []
    t0 = time.perf_counter()
    for step in range(config.epochs):
        grad = np.zeros_like(psi)
        total = 0.0
        for i in rng.integers(len(episodes), size=config.batch_size):
            ep = episodes[i]
            theta, cache = net.generate(psi, ep.unlabeled_x, with_cache=True)
            loss, d_theta = classification_loss_grad(net_spec, theta, (ep.x_train, ep.y_train))
            grad += net.backward(cache, d_theta) / config.batch_size
            total += loss / config.batch_size
        psi, state = optimizer_step(opt_cfg, state, psi, grad, step)
        curve.append(total)
    report = {"mode": "hypernet_baseline", "config": asdict(config), "loss_curve": curve,
              "wall_time_s": time.perf_counter() - t0}
    return net, psi, report


def group_by_task(samples):
    out = defaultdict(list)
    for s in samples:
        out[s.task_id].append(s)
    return dict(out)
