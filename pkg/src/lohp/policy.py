"""Gaussian-policy generator: task encoder, shared trunk, forward/backward/coefficient heads.

All parameters φ sit in one flat vector, laid out as

    encoder MLP  [x_dim, encoder_hidden, embed_dim]   (mean-pooled over x rows)
    trunk MLP    [state_dim + embed_dim + 1, *trunk_hidden], tanh on every layer
    forward head  hidden -> (Δμ, raw σ)   2·state_dim outputs
    backward head hidden -> (Δμ, raw σ)   2·state_dim outputs
    coeff head    hidden -> log C          1 output          (coeff_inputs="state")
                  or MLP [embed_dim + 1, coeff_hidden, 1] on (task embedding, t/N)
                                                            (coeff_inputs="context")

Means are residual (μ = s + Δμ) and σ = softplus(raw σ) + σ_floor.

With coeff_inputs="context" the coefficient ignores the state, so C·R_n(s)
keeps the shape of R_n in s. A state-dependent C can learn to cancel R_n's
dependence on s exactly, after which the residual no longer carries any
signal about where the targets are.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .nn import DimensionError, MlpSpec, mlp_forward_with_cache, mlp_vjp_from_cache

LOG_2PI = float(np.log(2 * np.pi))
HEADS = ("forward", "backward", "coeff")
PHI_MAGIC = b"LOHP-PHI"
PHI_VERSION = 1


@dataclass(frozen=True)
class PolicyArch:
    state_dim: int
    x_dim: int
    embed_dim: int = 8
    encoder_hidden: int = 16
    trunk_hidden: tuple[int, ...] = (64,)
    sigma_floor: float = 1e-3
    sigma_init: float = 0.0  # initial raw-σ bias
    coeff_inputs: str = "context"  # context: log C(x, t); state: log C(s, x, t) from the shared trunk
    coeff_hidden: int = 16

    def __post_init__(self):
        object.__setattr__(self, "trunk_hidden", tuple(int(h) for h in self.trunk_hidden))
        if self.coeff_inputs not in ("context", "state"):
            raise ValueError(f"unknown coeff_inputs {self.coeff_inputs!r}")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def canonical_x(x) -> np.ndarray:
    """Rows sorted lexicographically so that any ordering of the set gives identical bits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("conditioning needs a nonempty (rows, x_dim) matrix")
    order = np.lexsort(x.T[::-1])
    return np.ascontiguousarray(x[order])


@dataclass(frozen=True)
class Conditioning:
    x: np.ndarray
    time: float = 0.0

    @classmethod
    def from_samples(cls, x, time=0.0):
        return cls(canonical_x(x), float(time))


@dataclass
class PolicyOutput:
    mu: np.ndarray | None
    sigma: np.ndarray | None
    log_c: float | np.ndarray


class PolicyModel:
    def __init__(self, arch: PolicyArch):
        self.arch = arch
        D, E = arch.state_dim, arch.embed_dim
        self.encoder = MlpSpec((arch.x_dim, arch.encoder_hidden, E), "tanh")
        self.trunk = MlpSpec((D + E + 1, *arch.trunk_hidden), "tanh")
        H = arch.trunk_hidden[-1]
        self.hidden = H
        self.coeff_net = MlpSpec((E + 1, arch.coeff_hidden, 1), "tanh") if arch.coeff_inputs == "context" else None
        sizes = {
            "encoder": self.encoder.n_params,
            "trunk": self.trunk.n_params,
            "forward": H * 2 * D + 2 * D,
            "backward": H * 2 * D + 2 * D,
            "coeff": H + 1 if self.coeff_net is None else self.coeff_net.n_params,
        }
        self.slices = {}
        off = 0
        for name, size in sizes.items():
            self.slices[name] = slice(off, off + size)
            off += size
        self.n_params = off

    # -- parameter bookkeeping -------------------------------------------------
    def head_params(self, phi, head):
        p = phi[self.slices[head]]
        H = self.hidden
        out = 1 if head == "coeff" else 2 * self.arch.state_dim
        return p[:H * out].reshape(H, out), p[H * out:]

    def init(self, rng) -> np.ndarray:
        phi = np.zeros(self.n_params)
        nets = [("encoder", self.encoder), ("trunk", self.trunk)]
        if self.coeff_net is not None:
            nets.append(("coeff", self.coeff_net))
        for name, spec in nets:
            layers = [(rng.standard_normal((a, b)) / np.sqrt(a), np.zeros(b))
                      for a, b in zip(spec.layer_widths[:-1], spec.layer_widths[1:])]
            if name == "coeff":
                layers[-1] = (np.zeros_like(layers[-1][0]), layers[-1][1])  # log C starts at 0
            phi[self.slices[name]] = spec.flatten(layers)
        D = self.arch.state_dim
        for head in ("forward", "backward"):
            _, b = self.head_params(phi, head)
            b[D:] = self.arch.sigma_init
        return phi

    def check(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.n_params,):
            raise DimensionError("policy parameters", self.n_params, phi.shape)
        return phi

    # -- batched building blocks -------------------------------------------------
    def encode(self, phi, X):
        """X: (B, rows, x_dim) of canonicalized sets -> (B, embed_dim) mean-pooled embedding."""
        B, n, dx = X.shape
        out, cache = mlp_forward_with_cache(self.encoder, phi[self.slices["encoder"]], X.reshape(B * n, dx))
        return out.reshape(B, n, -1).mean(axis=1), (cache, B, n)

    def encode_backward(self, enc_cache, d_emb, grad):
        cache, B, n = enc_cache
        g = np.repeat(d_emb[:, None, :] / n, n, axis=1).reshape(B * n, -1)
        grad[self.slices["encoder"]] += mlp_vjp_from_cache(self.encoder, cache, g)[0]

    def trunk_forward(self, phi, s, emb, tfeat):
        inp = np.concatenate([s, emb, tfeat[:, None]], axis=1)
        z, cache = mlp_forward_with_cache(self.trunk, phi[self.slices["trunk"]], inp)
        h = np.tanh(z)
        return h, cache

    def trunk_backward(self, cache, h, dh, grad):
        dp, dinp = mlp_vjp_from_cache(self.trunk, cache, dh * (1.0 - h * h))
        grad[self.slices["trunk"]] += dp
        D, E = self.arch.state_dim, self.arch.embed_dim
        return dinp[:, :D], dinp[:, D:D + E]

    def gaussian_head(self, phi, head, h, s):
        W, b = self.head_params(phi, head)
        out = h @ W + b
        D = self.arch.state_dim
        raw = out[:, D:]
        return s + out[:, :D], softplus(raw) + self.arch.sigma_floor, raw

    def log_coeff(self, phi, h, emb, tfeat):
        """log C per row; returns (values, cache for log_coeff_backward)."""
        if self.coeff_net is None:
            W, b = self.head_params(phi, "coeff")
            return (h @ W + b)[:, 0], None
        inp = np.concatenate([emb, tfeat[:, None]], axis=1)
        out, cache = mlp_forward_with_cache(self.coeff_net, phi[self.slices["coeff"]], inp)
        return out[:, 0], cache

    def log_coeff_backward(self, phi, cache, h, dlogc, grad):
        """Returns (dh, d_emb); one of them is zero depending on coeff_inputs."""
        d = np.asarray(dlogc, dtype=np.float64).reshape(-1, 1)
        if self.coeff_net is None:
            return self.head_backward(phi, "coeff", h, d, grad), 0.0
        dp, dinp = mlp_vjp_from_cache(self.coeff_net, cache, d)
        grad[self.slices["coeff"]] += dp
        return 0.0, dinp[:, :self.arch.embed_dim]

    def head_backward(self, phi, head, h, d_out, grad):
        """d_out: gradient wrt the head's raw outputs. Returns dh."""
        W, _ = self.head_params(phi, head)
        gW, gb = self.head_params(grad, head)
        gW += h.T @ d_out
        gb += d_out.sum(axis=0)
        return d_out @ W.T


def _as_batch(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def policy_eval(model: PolicyModel, phi, s, cond: Conditioning, head: str) -> PolicyOutput:
    """Evaluate one head at state `s` (a vector or a (B, D) batch sharing `cond`)."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    phi = model.check(phi)
    single = np.ndim(s) == 1
    s = _as_batch(s)
    if s.shape[1] != model.arch.state_dim:
        raise DimensionError("state", model.arch.state_dim, s.shape[1])
    x = np.asarray(cond.x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.x_dim:
        raise DimensionError("conditioning x columns", model.arch.x_dim, x.shape)
    emb, _ = model.encode(phi, x[None])
    B = s.shape[0]
    embB, tB = np.repeat(emb, B, axis=0), np.full(B, cond.time)
    h, _ = model.trunk_forward(phi, s, embB, tB)
    log_c, _ = model.log_coeff(phi, h, embB, tB)
    if head == "coeff":
        out = PolicyOutput(None, None, log_c)
    else:
        mu, sigma, _ = model.gaussian_head(phi, head, h, s)
        out = PolicyOutput(mu, sigma, log_c)
    if single:
        out = PolicyOutput(None if out.mu is None else out.mu[0],
                           None if out.sigma is None else out.sigma[0], float(out.log_c[0]))
    return out


def gaussian_log_prob(s_next, out: PolicyOutput, sigma_floor=1e-3):
    """Diagonal Gaussian log-density; sums over the last axis."""
    s_next = np.asarray(s_next, dtype=np.float64)
    mu = np.asarray(out.mu, dtype=np.float64)
    sigma = np.asarray(out.sigma, dtype=np.float64)
    if s_next.shape != mu.shape or sigma.shape != mu.shape:
        raise DimensionError("gaussian operands", mu.shape, (s_next.shape, sigma.shape))
    if np.any(sigma < sigma_floor * (1 - 1e-12)):
        raise ValueError(f"sigma below floor {sigma_floor}")
    u = (s_next - mu) / sigma
    return -0.5 * np.sum(u * u, axis=-1) - np.sum(np.log(sigma), axis=-1) - 0.5 * mu.shape[-1] * LOG_2PI


def gaussian_log_prob_grad(s_next, mu, sigma):
    """Returns (log p, d/ds_next, d/dmu, d/dsigma)."""
    u = (s_next - mu) / sigma
    lp = -0.5 * np.sum(u * u, axis=-1) - np.sum(np.log(sigma), axis=-1) - 0.5 * mu.shape[-1] * LOG_2PI
    ds = -u / sigma
    return lp, ds, -ds, (u * u - 1.0) / sigma


@dataclass
class OnlineTrajectory:
    states: np.ndarray  # (N+1, D)
    log_pf: np.ndarray  # (N,) log P^F(s_{t+1} | s_t)
    log_pb: np.ndarray  # (N,) log P^B(s_t | s_{t+1})
    noise: np.ndarray  # (N, D) standard-normal draws behind each transition

    @property
    def N(self) -> int:
        return self.log_pf.shape[0]


def sample_online_trajectory(model: PolicyModel, phi, s0, x, N, rng, noise=None) -> OnlineTrajectory:
    """s_{t+1} = μ^F(s_t) + σ^F(s_t) ⊙ z_t, with the time feature t/N."""
    if N < 1:
        raise ValueError("N must be >= 1")
    phi = model.check(phi)
    D = model.arch.state_dim
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.shape != (D,):
        raise DimensionError("s0", (D,), s0.shape)
    xc = canonical_x(x)
    emb, _ = model.encode(phi, xc[None])
    z = rng.standard_normal((N, D)) if noise is None else np.asarray(noise, dtype=np.float64)
    states = np.empty((N + 1, D))
    states[0] = s0
    log_pf = np.empty(N)
    hs = []
    for t in range(N + 1):
        h, _ = model.trunk_forward(phi, states[t:t + 1], emb, np.array([t / N]))
        hs.append(h)
        if t == N:
            break
        mu, sigma, _ = model.gaussian_head(phi, "forward", h, states[t:t + 1])
        states[t + 1] = mu[0] + sigma[0] * z[t]
        if not np.all(np.isfinite(states[t + 1])):
            raise FloatingPointError(f"non-finite state at step {t + 1}")
        log_pf[t] = gaussian_log_prob(states[t + 1], PolicyOutput(mu[0], sigma[0], 0.0), model.arch.sigma_floor)
    log_pb = np.empty(N)
    for t in range(N):
        mu, sigma, _ = model.gaussian_head(phi, "backward", hs[t + 1], states[t + 1:t + 2])
        log_pb[t] = gaussian_log_prob(states[t], PolicyOutput(mu[0], sigma[0], 0.0), model.arch.sigma_floor)
    return OnlineTrajectory(states, log_pf, log_pb, z)


def save_policy(path, model: PolicyModel, phi) -> None:
    spec = json.dumps(asdict(model.arch), sort_keys=True).encode()
    phi = model.check(phi)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sHI", PHI_MAGIC, PHI_VERSION, len(spec)))
        fh.write(spec)
        fh.write(struct.pack("<Q", phi.size))
        fh.write(np.ascontiguousarray(phi, dtype="<f8").tobytes())


def load_policy(path) -> tuple[PolicyModel, np.ndarray]:
    from .store import StoreFormatError

    with open(path, "rb") as fh:
        buf = fh.read()
    head = struct.Struct("<8sHI")
    if len(buf) < head.size:
        raise StoreFormatError("truncated policy header", len(buf))
    magic, version, nspec = head.unpack_from(buf, 0)
    if magic != PHI_MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}", 0)
    if version != PHI_VERSION:
        raise StoreFormatError(f"unsupported version {version}", 8)
    off = head.size
    arch = json.loads(buf[off:off + nspec].decode())
    arch["trunk_hidden"] = tuple(arch["trunk_hidden"])
    model = PolicyModel(PolicyArch(**arch))
    off += nspec
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if count != model.n_params or off + 8 * count != len(buf):
        raise StoreFormatError("parameter block size mismatch", off)
    phi = np.frombuffer(buf, "<f8", count, off).astype(np.float64)
    return model, phi
