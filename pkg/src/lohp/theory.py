"""Brute-force checks of the flow identity, segment composition and the error decomposition.

The discrete side uses a layered DAG with tabular policies. Every state at
layer l connects to every state at layer l+1; P^F and P^B are softmaxes of
free logits so both are row-stochastic by construction, and the flow of a
state is C(s)·R(s), carried in the log domain as log C + log R.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tasks import QuadraticTask, quadratic_loss_grad

ENUMERATION_LIMIT = 10**6
BALANCE_TOL = 1e-6


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


@dataclass
class MicroEnv:
    """Layer sizes plus per-transition logits. Transition l goes from layer l to l+1.

    pf_logits[l]: (n_l, n_{l+1}), rows normalised into P^F(·|s).
    pb_logits[l]: (n_{l+1}, n_l), rows normalised into P^B(·|s').
    """
    sizes: tuple
    pf_logits: list
    pb_logits: list
    log_c: list
    log_r: list
    max_residual: float = field(default=float("nan"))

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError("need at least two nonempty layers")
        L = len(self.sizes)
        for l in range(L - 1):
            a, b = self.sizes[l], self.sizes[l + 1]
            if np.shape(self.pf_logits[l]) != (a, b) or np.shape(self.pb_logits[l]) != (b, a):
                raise ValueError(f"logit shapes at transition {l} do not match layer sizes")
        for l in range(L):
            if np.shape(self.log_c[l]) != (self.sizes[l],) or np.shape(self.log_r[l]) != (self.sizes[l],):
                raise ValueError(f"log C / log R shapes at layer {l} do not match")

    @property
    def n_layers(self) -> int:
        return len(self.sizes)

    def log_pf(self, l):
        return _log_softmax(np.asarray(self.pf_logits[l], dtype=np.float64))

    def log_pb(self, l):
        return _log_softmax(np.asarray(self.pb_logits[l], dtype=np.float64))

    def log_flow(self, l):
        return np.asarray(self.log_c[l]) + np.asarray(self.log_r[l])

    def copy(self) -> "MicroEnv":
        return MicroEnv(self.sizes, [np.array(a, dtype=np.float64) for a in self.pf_logits],
                        [np.array(a, dtype=np.float64) for a in self.pb_logits],
                        [np.array(a, dtype=np.float64) for a in self.log_c],
                        [np.array(a, dtype=np.float64) for a in self.log_r], self.max_residual)


def random_microenv(rng, n_layers, width, single_root=True, scale=1.0) -> MicroEnv:
    """Random logits, log C and log R. With `single_root` layer 0 holds one state."""
    sizes = tuple([1 if single_root else width] + [width] * (n_layers - 1))
    g = lambda *shape: scale * rng.standard_normal(shape)
    return MicroEnv(sizes,
                    [g(a, b) for a, b in zip(sizes[:-1], sizes[1:])],
                    [g(b, a) for a, b in zip(sizes[:-1], sizes[1:])],
                    [g(s) for s in sizes], [g(s) for s in sizes])


def edge_residuals(env: MicroEnv) -> list:
    """g[l][i, j] = log F(l, i) + log P^F(j|i) - log F(l+1, j) - log P^B(i|j)."""
    out = []
    for l in range(env.n_layers - 1):
        out.append(env.log_flow(l)[:, None] + env.log_pf(l)
                   - env.log_flow(l + 1)[None, :] - env.log_pb(l).T)
    return out


def _count_paths(sizes, a, b, from_single=False):
    n = 1 if from_single else sizes[a]
    for l in range(a + 1, b + 1):
        n *= sizes[l]
    return n


def count_subtrajectories(env: MicroEnv) -> int:
    return sum(_count_paths(env.sizes, a, b) for a in range(env.n_layers)
               for b in range(a + 1, env.n_layers))


def _edge_index(sizes):
    offsets, off = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        offsets.append(off)
        off += a * b
    return offsets, off


def subtrajectory_incidence(env: MicroEnv) -> np.ndarray:
    """0/1 matrix (n_subtrajectories, n_edges); row = the edges a path uses.

    A path's residual is the sum of its edge residuals (intermediate flows cancel).
    """
    total = count_subtrajectories(env)
    if total > ENUMERATION_LIMIT:
        raise ValueError(f"{total} sub-trajectories exceed the enumeration guard {ENUMERATION_LIMIT}")
    offsets, n_edges = _edge_index(env.sizes)
    rows = []
    for a in range(env.n_layers):
        for b in range(a + 1, env.n_layers):
            for path in itertools.product(*(range(env.sizes[l]) for l in range(a, b + 1))):
                row = np.zeros(n_edges)
                for step, l in enumerate(range(a, b)):
                    row[offsets[l] + path[step] * env.sizes[l + 1] + path[step + 1]] = 1.0
                rows.append(row)
    return np.array(rows)


def all_subtrajectory_residuals(env: MicroEnv, incidence=None) -> np.ndarray:
    g = np.concatenate([e.ravel() for e in edge_residuals(env)])
    M = subtrajectory_incidence(env) if incidence is None else incidence
    return M @ g


def _pack(env):
    return np.concatenate([np.ravel(a) for a in (*env.pf_logits, *env.pb_logits, *env.log_c)])


def _unpack(env, vec):
    out = env.copy()
    off = 0
    for lst in (out.pf_logits, out.pb_logits, out.log_c):
        for i, a in enumerate(lst):
            lst[i] = vec[off:off + a.size].reshape(a.shape)
            off += a.size
    return out


def _edge_grad(env, d_edges):
    """Pull dLoss/d(edge residual) back onto (pf logits, pb logits, log C)."""
    d_pf, d_pb = [], []
    d_c = [np.zeros(s) for s in env.sizes]
    for l, d in enumerate(d_edges):
        # log-softmax VJP: dz = d - p * sum(d)
        p = np.exp(env.log_pf(l))
        d_pf.append(d - p * d.sum(axis=1, keepdims=True))
        q = np.exp(env.log_pb(l))
        dt = -d.T
        d_pb.append(dt - q * dt.sum(axis=1, keepdims=True))
        d_c[l] += d.sum(axis=1)
        d_c[l + 1] -= d.sum(axis=0)
    return np.concatenate([np.ravel(a) for a in (*d_pf, *d_pb, *d_c)])


def train_microenv(env: MicroEnv, steps, lr, rng=None, objective="squared") -> MicroEnv:
    """Plain gradient descent on the residuals of all sub-trajectories.

    objective="abs" minimises mean |r| exactly as the continuous loss does;
    "squared" minimises mean r², which has the same zero set but a smooth
    minimum, so fixed-step descent drives it to round-off. log R stays fixed.
    The returned env carries its final max |r| in `max_residual`.
    `rng` is accepted for interface symmetry; the descent itself is deterministic.
    """
    if objective not in ("squared", "abs"):
        raise ValueError(f"unknown objective {objective!r}")
    M = subtrajectory_incidence(env)
    offsets, _ = _edge_index(env.sizes)
    shapes = [(a, b) for a, b in zip(env.sizes[:-1], env.sizes[1:])]
    vec = _pack(env)
    cur = env.copy()
    for step in range(steps if lr != 0 else 0):
        r = all_subtrajectory_residuals(cur, M)
        if not np.all(np.isfinite(r)):
            raise FloatingPointError(f"non-finite residual at step {step}")
        w = 2.0 * r / len(r) if objective == "squared" else np.sign(r) / len(r)
        flat = M.T @ w
        d_edges = [flat[o:o + a * b].reshape(a, b) for o, (a, b) in zip(offsets, shapes)]
        vec = vec - lr * _edge_grad(cur, d_edges)
        if not np.all(np.isfinite(vec)):
            raise FloatingPointError(f"non-finite logits at step {step}")
        cur = _unpack(env, vec)
    cur.max_residual = float(np.max(np.abs(all_subtrajectory_residuals(cur, M))))
    return cur


def balanced_microenv(rng, n_layers, width, single_root=True) -> MicroEnv:
    """Closed-form zero-residual env: push flow forward, then set P^B to the exact posterior."""
    env = random_microenv(rng, n_layers, width, single_root)
    log_f = [env.log_flow(0)]
    for l in range(n_layers - 1):
        joint = log_f[l][:, None] + env.log_pf(l)  # log F(s) P^F(s'|s)
        nxt = np.logaddexp.reduce(joint, axis=0)
        log_f.append(nxt)
        env.pb_logits[l] = (joint - nxt[None, :]).T
    for l in range(n_layers):
        env.log_c[l] = log_f[l] - env.log_r[l]
    env.max_residual = float(np.max(np.abs(all_subtrajectory_residuals(env))))
    return env


# -- flow identity -----------------------------------------------------------------

def enumerate_paths(env: MicroEnv, m, n, source):
    """All state paths from `source` at layer m to layer n, with their log Π P^F and log Π P^B."""
    if not 0 <= m < n < env.n_layers:
        raise ValueError(f"need 0 <= m < n < {env.n_layers}, got m={m} n={n}")
    if not 0 <= source < env.sizes[m]:
        raise ValueError(f"source {source} not in layer {m}")
    total = _count_paths(env.sizes, m, n, from_single=True)
    if total > ENUMERATION_LIMIT:
        raise ValueError(f"{total} trajectories exceed the enumeration guard {ENUMERATION_LIMIT}")
    lpf = [env.log_pf(l) for l in range(m, n)]
    lpb = [env.log_pb(l) for l in range(m, n)]
    for tail in itertools.product(*(range(env.sizes[l]) for l in range(m + 1, n + 1))):
        path = (source,) + tail
        f = math.fsum(lpf[i][path[i], path[i + 1]] for i in range(n - m))
        b = math.fsum(lpb[i][path[i + 1], path[i]] for i in range(n - m))
        yield path, f, b


class IdentityVerdict(NamedTuple):
    lhs: np.ndarray  # Σ_τ Π P^F, per terminal
    rhs: np.ndarray  # C·R ratio times the backward reach mass of the source
    rhs_literal: np.ndarray  # the C·R ratio alone
    reach: np.ndarray  # Σ_τ Π P^B from each terminal back to the source
    rel_error: float
    literal_rel_error: float
    proportionality_error: float
    passed: bool


def verify_theorem1(env: MicroEnv, m, n, source=0, tol=1e-3, check_precondition=True) -> IdentityVerdict:
    """Sum of forward path probabilities against the flow ratio, for every terminal at layer n.

    With zero residual on every edge, Σ_τ Π P^F = F(s_n)/F(s_m) · Σ_τ Π P^B. The
    backward factor is the probability that P^B started at s_n lands on the
    source, which is 1 exactly when the source is the only state in its layer;
    `rhs` includes it, `rhs_literal` does not. The proportionality check asks
    that lhs / (C R reach) be one constant across terminals.
    """
    if check_precondition:
        worst = float(np.max(np.abs(all_subtrajectory_residuals(env))))
        if worst > BALANCE_TOL:
            raise ValueError(f"env is not balanced (max |r| = {worst:.3g} > {BALANCE_TOL})")
    W = env.sizes[n]
    lhs_terms = [[] for _ in range(W)]
    reach_terms = [[] for _ in range(W)]
    for path, f, b in enumerate_paths(env, m, n, source):
        lhs_terms[path[-1]].append(f)
        reach_terms[path[-1]].append(b)
    lhs = np.array([math.fsum(np.exp(t)) for t in lhs_terms])
    reach = np.array([math.fsum(np.exp(t)) for t in reach_terms])
    log_f = env.log_flow(n) - env.log_flow(m)[source]
    literal = np.exp(log_f)
    rhs = literal * reach
    rel = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)))
    lit = float(np.max(np.abs(lhs - literal) / np.maximum(np.abs(literal), 1e-300)))
    ratio = lhs / (np.exp(env.log_flow(n)) * reach)
    prop = float(ratio.max() / ratio.min() - 1.0)
    return IdentityVerdict(lhs, rhs, literal, reach, rel, lit, prop, rel <= tol and prop <= tol)


def forward_closure(env: MicroEnv, m, n, source=0) -> float:
    """Σ over every path from the source to layer n of Π P^F; 1 by row-stochasticity."""
    return math.fsum(math.exp(f) for _, f, _ in enumerate_paths(env, m, n, source))


def backward_closure(env: MicroEnv, m, n, terminal) -> float:
    """Σ over every backward path from `terminal` at layer n down to layer m of Π P^B."""
    lpb = [env.log_pb(l) for l in range(m, n)]
    total = []
    for head in itertools.product(*(range(env.sizes[l]) for l in range(m, n))):
        path = head + (terminal,)
        total.append(math.exp(math.fsum(lpb[i][path[i + 1], path[i]] for i in range(n - m))))
    return math.fsum(total)


# -- composition -------------------------------------------------------------------

class CompositionVerdict(NamedTuple):
    full_residual: float
    sum_segment_residuals: float  # Σ |g_i|
    holds: bool  # |Σ g_i| ≤ Σ |g_i|
    telescoped: float  # Σ g_i, equal to full_residual up to round-off


def composition_from_segments(g, full_residual=None) -> CompositionVerdict:
    """Triangle inequality on given segment residuals; sums are correctly rounded (fsum)."""
    g = [float(v) for v in g]
    tele = math.fsum(g)
    bound = math.fsum(abs(v) for v in g)
    return CompositionVerdict(tele if full_residual is None else float(full_residual), bound,
                              abs(tele) <= bound, tele)


def path_residual(env: MicroEnv, path, a, b) -> float:
    """Residual of the segment of `path` (one state per layer) between layers a and b."""
    lf = env.log_flow
    pf = math.fsum(env.log_pf(l)[path[l], path[l + 1]] for l in range(a, b))
    pb = math.fsum(env.log_pb(l)[path[l + 1], path[l]] for l in range(a, b))
    return (lf(a)[path[a]] + pf) - (lf(b)[path[b]] + pb)


def verify_theorem2_composition(env: MicroEnv, segment_partition, path=None) -> CompositionVerdict:
    """Split the full path at the partition boundaries and compare residuals.

    `segment_partition` is an increasing boundary list from 0 to the last layer.
    `path` picks one state per layer (defaults to state 0 everywhere).
    """
    bounds = [int(b) for b in segment_partition]
    last = env.n_layers - 1
    if bounds[0] != 0 or bounds[-1] != last or any(b1 <= b0 for b0, b1 in zip(bounds, bounds[1:])):
        raise ValueError(f"partition must increase strictly from 0 to {last}, got {bounds}")
    path = [0] * env.n_layers if path is None else [int(p) for p in path]
    g = [path_residual(env, path, a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    return composition_from_segments(g, path_residual(env, path, 0, last))


def random_partition(rng, last) -> list:
    inner = [i for i in range(1, last) if rng.random() < 0.5]
    return [0] + inner + [last]


# -- error decomposition -----------------------------------------------------------

class DecompositionVerdict(NamedTuple):
    lhs: float
    rhs: float
    holds: bool
    c: float
    psi: float


def verify_theorem3_decomposition(task: QuadraticTask, theta_hat, theta_T, T, theta0) -> DecompositionVerdict:
    """L(θ̂) - L(θ*) ≤ λ/2 [c + 2ψ/μ (1 - μ/l)^T] with c = ‖θ̂ - θ_T‖², ψ = L(θ_0), λ = l.

    Both sides are evaluated on the given instance; c is measured, never assumed.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    c = float(np.sum((theta_hat - np.asarray(theta_T, dtype=np.float64)) ** 2))
    lhs = float(quadratic_loss_grad(task, theta_hat)[0])  # L(θ*) = 0 by construction
    psi = float(quadratic_loss_grad(task, theta0)[0])
    mu, l = task.mu, task.l
    rhs = 0.5 * l * (c + 2.0 * psi / mu * (1.0 - mu / l) ** T)
    return DecompositionVerdict(lhs, rhs, lhs <= rhs * (1 + 1e-9), c, psi)
