"""Inference, accuracy, cosine-similarity diagnostics and 2D trajectory projections."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nn import MlpSpec, gaussian_sample
from .policy import PolicyModel, sample_online_trajectory
from .store import OfflineTrajectory, aligned_pairs
from .tasks import Episode, accuracy, task_conditioning

COS_BINS = np.linspace(-1.0, 1.0, 21)


def inference_steps(T: int, k: int) -> int:
    """N = T/k on the k-truncated horizon."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return (T - T % k) // k


def infer_weights(model: PolicyModel, phi, task, N, rng, s0=None):
    """One online trajectory of N steps; returns (θ̂ = s_N, seconds spent sampling).

    `s0` defaults to a fresh N(0, I) draw from `rng`.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    x = task_conditioning(task) if not isinstance(task, np.ndarray) else task
    s0 = gaussian_sample(rng, model.arch.state_dim) if s0 is None else np.asarray(s0, dtype=np.float64)
    t0 = time.perf_counter()
    traj = sample_online_trajectory(model, phi, s0, x, N, rng)
    return traj.states[-1], time.perf_counter() - t0


def median_latency(model: PolicyModel, phi, task, N, rng, runs=50, s0=None) -> float:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    return float(np.median([infer_weights(model, phi, task, N, rng, s0)[1] for _ in range(runs)]))


def eval_generated_weights(theta, episode: Episode, spec: MlpSpec) -> float:
    return accuracy(spec, theta, episode.x_eval, episode.y_eval)


def cos_sim(a, b):
    """(cosine, degenerate flag); a zero vector on either side gives (0.0, True)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False


@dataclass
class CosineReport:
    values: np.ndarray
    counts: np.ndarray  # per bin of COS_BINS
    mean: float
    degenerate: int

    def rows(self):
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(COS_BINS[:-1], COS_BINS[1:], self.counts)]


def cosine_histogram(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    # the last bin is closed so that cos = 1 is counted
    return np.histogram(v, bins=COS_BINS)[0]


def cos_sim_diagnostic(model: PolicyModel, phi, trajectories, conditionings, k, n_pairs, rng) -> CosineReport:
    """Cosine between online displacement s_{n'} - s_{m'} and offline θ_n - θ_m.

    `trajectories` keep every offline state; `conditionings[i]` is the x set of
    trajectory i. Each pair draws a trajectory and a k-aligned (m, n), then
    rolls the policy out from that trajectory's θ_0 for N = T/k steps.
    """
    vals, bad = [], 0
    for _ in range(n_pairs):
        i = int(rng.integers(len(trajectories)))
        traj: OfflineTrajectory = trajectories[i]
        pairs = aligned_pairs(traj.T, k)
        m, n = pairs[rng.integers(len(pairs))]
        N = inference_steps(traj.T, k)
        on = sample_online_trajectory(model, phi, traj.states[0], conditionings[i], N, rng)
        c, flag = cos_sim(on.states[n // k] - on.states[m // k], traj.states[n] - traj.states[m])
        vals.append(c)
        bad += flag
    vals = np.array(vals)
    return CosineReport(vals, cosine_histogram(vals), float(vals.mean()) if len(vals) else 0.0, bad)


def project_trajectories_2d(trajectories):
    """Rows (traj_id, step, u, v) on the top-2 principal axes of the pooled states.

    Returns (rows, fallback). Two-dimensional states pass through unchanged.
    Loadings are sign-fixed so that their first nonzero entry is positive. If
    the pooled covariance has rank < 2, the first two coordinates are used
    and `fallback` is True.
    """
    trajs = [np.asarray(t, dtype=np.float64) for t in trajectories]
    if not trajs:
        raise ValueError("no trajectories")
    dim = trajs[0].shape[1]
    pooled = np.concatenate(trajs)
    fallback = False
    if dim == 2:
        proj = [t for t in trajs]
    elif dim < 2:
        raise ValueError("states need at least two coordinates")
    else:
        centre = pooled.mean(axis=0)
        _, svals, vt = np.linalg.svd(pooled - centre, full_matrices=False)
        tol = max(pooled.shape) * np.finfo(float).eps * (svals[0] if svals.size else 0.0)
        if svals.size < 2 or svals[0] <= tol:
            fallback = True
            proj = [t[:, :2] for t in trajs]
        else:
            axes = vt[:2].copy()
            for a in axes:
                nz = np.flatnonzero(np.abs(a) > 1e-12)
                if nz.size and a[nz[0]] < 0:
                    a *= -1.0
            proj = [(t - centre) @ axes.T for t in trajs]
    rows = [(i, step, float(p[0]), float(p[1])) for i, t in enumerate(proj) for step, p in enumerate(t)]
    return rows, fallback
