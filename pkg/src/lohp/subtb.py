"""Sub-trajectory balance residuals with analytic gradients.

A batch row describes one online segment s_{m'} .. s_{n'} of a rollout that
starts at s_0 and is driven by fixed standard-normal draws z_t, so the whole
residual is a deterministic function of φ. Its balance residual is

    r = [log C(s_{m'}) + a·log R(s_{m'})] + Σ log P^F(s_{t+1}|s_t)
      - [b·log C(s_{n'}) + c·log R(s_{n'})] - Σ log P^B(s_t|s_{t+1})

with per-row switches (a, b, c): the hybrid objective uses (1, 1, 1); the
vanilla objective uses (0, 1, 0), or (0, 0, 1) on segments that end at the
terminal state, where the learned flow is replaced by the terminal reward.

Every rollout starts from one fixed s_0, so the backward step s_1 -> s_0 is
certain and contributes log P^B = 0 (``fixed_source``). Scoring it with the
Gaussian backward head instead makes "stand still" an exact zero of the
hybrid residual: with μ = s, σ at the floor and P^B mirroring P^F, the reward
terms and the log-probability sums cancel on every segment. Anchoring the
source removes that solution, since segments from s_0 then balance a
forward density against C·R_n alone.

Gradients either flow through the sampled states (``pathwise``) or treat
the states as constants (``detached``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import LOG_2PI, OnlineTrajectory, PolicyModel, canonical_x, gaussian_log_prob_grad, sigmoid
from .store import SubTrajectorySample

ESTIMATORS = ("pathwise", "detached")


def reward_log(s, theta_n, scale=1.0):
    """log R_n(s) = -β‖s - θ_n‖² (β = `scale`, 1 by default); never exponentiated."""
    d = np.asarray(s, dtype=np.float64) - np.asarray(theta_n, dtype=np.float64)
    return -scale * np.sum(d * d, axis=-1)


@dataclass
class MatchedPair:
    sample: SubTrajectorySample
    online: OnlineTrajectory
    k: int
    m_on: int
    n_on: int

    @property
    def N(self) -> int:
        return self.online.N


def match_segments(sample: SubTrajectorySample, online: OnlineTrajectory, k: int) -> MatchedPair:
    """Uniform assignment m' = m/k, n' = n/k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if sample.m % k or sample.n % k:
        raise ValueError(f"offline indices ({sample.m}, {sample.n}) are not aligned to k={k}")
    if sample.T % k or online.N != sample.T // k:
        raise ValueError(f"online length {online.N} does not equal T/k = {sample.T}/{k}")
    return MatchedPair(sample, online, k, sample.m // k, sample.n // k)


@dataclass
class SegmentBatch:
    s0: np.ndarray  # (B, D)
    noise: np.ndarray  # (B, L, D), L >= max(n_on)
    N: np.ndarray  # (B,) online length used for the time feature
    m_on: np.ndarray
    n_on: np.ndarray
    target: np.ndarray  # (B, D) reward centre
    start_reward: np.ndarray  # (B,) 0/1
    end_head: np.ndarray
    end_reward: np.ndarray
    X: np.ndarray  # (B, rows, x_dim) canonical conditioning sets
    states: np.ndarray | None = None  # (B, L+1, D) fixed states for the detached estimator
    reward_scale: float = 1.0
    fixed_source: bool = True  # s_0 is a single point, so the backward step into it is certain

    @property
    def size(self) -> int:
        return self.s0.shape[0]


def hybrid_rows(pairs) -> SegmentBatch:
    return _rows(pairs, vanilla=False)


def vanilla_rows(pairs, terminal_target=None) -> SegmentBatch:
    """Rows for the vanilla objective; segments ending at N are scored by R_T(s_N).

    `terminal_target` overrides the per-row terminal reward centre (defaults
    to θ_n of the matched sample, which equals θ_T on full-span rows).
    """
    return _rows(pairs, vanilla=True, terminal_target=terminal_target)


def _rows(pairs, vanilla, terminal_target=None):
    B = len(pairs)
    L = max(p.N for p in pairs)
    D = pairs[0].online.states.shape[1]
    noise = np.zeros((B, L, D))
    states = np.zeros((B, L + 1, D))
    for i, p in enumerate(pairs):
        noise[i, :p.N] = p.online.noise
        states[i, :p.N + 1] = p.online.states
    m = np.array([p.m_on for p in pairs])
    n = np.array([p.n_on for p in pairs])
    N = np.array([p.N for p in pairs])
    if vanilla:
        terminal = (n == N).astype(float)
        target = np.array([p.sample.theta_n for p in pairs]) if terminal_target is None \
            else np.asarray(terminal_target, dtype=np.float64).reshape(B, D)
        start_r, end_h, end_r = np.zeros(B), 1.0 - terminal, terminal
    else:
        target = np.array([p.sample.theta_n for p in pairs])
        start_r, end_h, end_r = np.ones(B), np.ones(B), np.ones(B)
    X = np.array([canonical_x(p.sample.conditioning) for p in pairs])
    s0 = np.array([p.online.states[0] for p in pairs])
    return SegmentBatch(s0, noise, N, m, n, target, start_r, end_h, end_r, X, states)


@dataclass
class ResidualTerms:
    r: np.ndarray  # (B,)
    states: np.ndarray  # (B, L+1, D)
    log_c: np.ndarray  # (B, L+1)
    log_pf: np.ndarray  # (B, L)
    log_pb: np.ndarray  # (B, L)
    log_r: np.ndarray  # (B, L+1) reward of every state against the row target


def balance_residuals(model: PolicyModel, phi, batch: SegmentBatch, estimator="pathwise", seed=None):
    """Residuals of every row; with `seed` (dLoss/dr per row) also the φ-gradient.

    `seed` may be a callable mapping the residual vector to dLoss/dr, which
    saves a second forward pass.

    Returns (terms, grad) where grad is None when no seed is given.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    phi = model.check(phi)
    pathwise = estimator == "pathwise"
    B = batch.size
    D = model.arch.state_dim
    rows = np.arange(B)
    last = int(batch.n_on.max())
    emb, enc_cache = model.encode(phi, batch.X)
    Nf = batch.N.astype(float)

    # pathwise always regenerates the rollout from s0 and the noise; detached
    # uses recorded states when given and otherwise treats a fresh rollout as constant
    rollout = pathwise or batch.states is None
    S = np.empty((B, last + 1, D))
    if rollout:
        S[:, 0] = batch.s0
    else:
        S[:] = batch.states[:, :last + 1]
    hs, caches, ccaches = [], [], []
    muF, sigF, rawF, muB, sigB, rawB = ([None] * (last + 1) for _ in range(6))
    log_c = np.empty((B, last + 1))
    for t in range(last + 1):
        h, cache = model.trunk_forward(phi, S[:, t], emb, t / Nf)
        hs.append(h)
        caches.append(cache)
        log_c[:, t], cc = model.log_coeff(phi, h, emb, t / Nf)
        ccaches.append(cc)
        if t > 0:
            muB[t], sigB[t], rawB[t] = model.gaussian_head(phi, "backward", h, S[:, t])
        if t < last:
            muF[t], sigF[t], rawF[t] = model.gaussian_head(phi, "forward", h, S[:, t])
            if rollout:
                S[:, t + 1] = muF[t] + sigF[t] * batch.noise[:, t]
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite online state")

    mask = np.zeros((B, max(last, 1)))
    log_pf = np.zeros((B, max(last, 1)))
    log_pb = np.zeros((B, max(last, 1)))
    lpF_grads, lpB_grads = [None] * last, [None] * last
    for t in range(last):
        mask[:, t] = (batch.m_on <= t) & (t < batch.n_on)
        if pathwise:
            z = batch.noise[:, t]
            log_pf[:, t] = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(sigF[t]), axis=1) - 0.5 * D * LOG_2PI
        else:
            lp, _, dmu, dsig = gaussian_log_prob_grad(S[:, t + 1], muF[t], sigF[t])
            log_pf[:, t] = lp
            lpF_grads[t] = (dmu, dsig)
        if t == 0 and batch.fixed_source:
            continue  # the only way back to the source: P^B(s_0 | s_1) = 1
        lp, ds_target, dmu, dsig = gaussian_log_prob_grad(S[:, t], muB[t + 1], sigB[t + 1])
        log_pb[:, t] = lp
        lpB_grads[t] = (ds_target, dmu, dsig)

    log_r = reward_log(S, batch.target[:, None, :], batch.reward_scale)
    m, n = batch.m_on, batch.n_on
    start = log_c[rows, m] + batch.start_reward * log_r[rows, m]
    end = batch.end_head * log_c[rows, n] + batch.end_reward * log_r[rows, n]
    r = start - end + np.sum(mask * log_pf, axis=1) - np.sum(mask * log_pb, axis=1)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError(f"non-finite residual: start={start} end={end} "
                                 f"pf={np.sum(mask * log_pf, axis=1)} pb={np.sum(mask * log_pb, axis=1)}")
    terms = ResidualTerms(r, S, log_c, log_pf[:, :last], log_pb[:, :last], log_r)
    if seed is None:
        return terms, None

    w = np.asarray(seed(r) if callable(seed) else seed, dtype=np.float64)
    grad = np.zeros(model.n_params)
    dS = np.zeros_like(S)
    dlogc = np.zeros((B, last + 1))
    np.add.at(dlogc, (rows, m), w)
    np.add.at(dlogc, (rows, n), -w * batch.end_head)
    if pathwise:
        # d log R / ds = -2β (s - target)
        c = -2.0 * batch.reward_scale
        dS[rows, m] += (w * batch.start_reward)[:, None] * c * (S[rows, m] - batch.target)
        dS[rows, n] -= (w * batch.end_reward)[:, None] * c * (S[rows, n] - batch.target)
    dmuF = [np.zeros((B, D)) for _ in range(last)]
    dsigF = [np.zeros((B, D)) for _ in range(last)]
    dmuB = [None] + [np.zeros((B, D)) for _ in range(last)]
    dsigB = [None] + [np.zeros((B, D)) for _ in range(last)]
    for t in range(last):
        wm = (w * mask[:, t])[:, None]
        if pathwise:
            dsigF[t] -= wm / sigF[t]
        else:
            dmu, dsig = lpF_grads[t]
            dmuF[t] += wm * dmu
            dsigF[t] += wm * dsig
        if lpB_grads[t] is None:
            continue
        ds_target, dmu, dsig = lpB_grads[t]
        dmuB[t + 1] -= wm * dmu
        dsigB[t + 1] -= wm * dsig
        if pathwise:
            dS[:, t] -= wm * ds_target

    d_emb = np.zeros_like(emb)
    for t in range(last, -1, -1):
        if pathwise and t < last:
            dmuF[t] += dS[:, t + 1]
            dsigF[t] += dS[:, t + 1] * batch.noise[:, t]
        h = hs[t]
        dh, de_c = model.log_coeff_backward(phi, ccaches[t], h, dlogc[:, t], grad)
        d_emb += de_c
        dh = dh + np.zeros_like(h)
        if t < last:
            d_out = np.concatenate([dmuF[t], dsigF[t] * sigmoid(rawF[t])], axis=1)
            dh += model.head_backward(phi, "forward", h, d_out, grad)
            if pathwise:
                dS[:, t] += dmuF[t]  # residual mean
        if t > 0:
            d_out = np.concatenate([dmuB[t], dsigB[t] * sigmoid(rawB[t])], axis=1)
            dh += model.head_backward(phi, "backward", h, d_out, grad)
            if pathwise:
                dS[:, t] += dmuB[t]
        ds_in, de = model.trunk_backward(caches[t], h, dh, grad)
        d_emb += de
        if pathwise:
            dS[:, t] += ds_in
    model.encode_backward(enc_cache, d_emb, grad)
    return terms, grad


def hybrid_loss_batch(model, phi, batch, estimator="pathwise", with_grad=True):
    """Mean of |r| over rows (the unsquared norm of a scalar residual); subgradient 0 at r = 0."""
    seed = (lambda r: np.sign(r) / batch.size) if with_grad else None
    terms, grad = balance_residuals(model, phi, batch, estimator, seed=seed)
    return float(np.mean(np.abs(terms.r))), grad, terms


def vanilla_loss_batch(model, phi, batch, estimator="pathwise", with_grad=True):
    """Mean of r² over rows."""
    seed = (lambda r: 2.0 * r / batch.size) if with_grad else None
    terms, grad = balance_residuals(model, phi, batch, estimator, seed=seed)
    return float(np.mean(terms.r ** 2)), grad, terms


def hybrid_subtb_loss(model, phi, pair: MatchedPair, estimator="pathwise"):
    loss, grad, _ = hybrid_loss_batch(model, phi, hybrid_rows([pair]), estimator)
    return loss, grad


def vanilla_subtb_loss(model, phi, pair: MatchedPair, estimator="pathwise", terminal_target=None):
    loss, grad, _ = vanilla_loss_batch(model, phi, vanilla_rows([pair], terminal_target), estimator)
    return loss, grad


def segment_residuals(terms: ResidualTerms, row: int, bounds) -> np.ndarray:
    """Segmentwise residuals g_i of one row for consecutive online indices `bounds`.

    Uses the row's own reward centre on every segment, so Σ g_i telescopes to
    the residual of the span (bounds[0], bounds[-1]).
    """
    c, lr = terms.log_c[row], terms.log_r[row]
    g = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        g.append(c[a] + lr[a] + terms.log_pf[row, a:b].sum() - c[b] - lr[b] - terms.log_pb[row, a:b].sum())
    return np.array(g)
