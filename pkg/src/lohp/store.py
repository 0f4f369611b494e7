"""Offline trajectories, k-aligned endpoint sampling, and the binary record store.

Store layout (all little-endian)::

    magic   b"LOHP"
    version u16
    count   u64
    record  task_id u64, m u32, n u32, T u32, dim u32, flags u8
            θ_m   dim × f64
            θ_n   dim × f64
            conditioning: rows u32, cols u32, rows·cols × f64 (unlabeled x),
                          then dim × f64 (θ_0, the trajectory's start state)

Only endpoints are kept, so a record's size depends on (dim, rows, cols) and
never on T.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LOHP"
VERSION = 1
EPISODE_MAGIC = b"LOHPEPIS"

FLAG_ADAM = 1
FLAG_SAM = 2
FLAG_FULL_SPAN = 4

_HEADER = struct.Struct("<4sHQ")
_RECORD = struct.Struct("<QIIIIB")
_COND = struct.Struct("<II")


class StoreFormatError(ValueError):
    def __init__(self, msg, offset):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})")


@dataclass
class OfflineTrajectory:
    task_id: int
    policy: str
    sam: bool
    states: np.ndarray  # (T+1, dim)
    eval_losses: np.ndarray  # (T+1,)
    batch_seed: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError("states must be a (T+1, dim) array")

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def truncate_trajectory(traj: OfflineTrajectory, k: int) -> OfflineTrajectory:
    """Drop the last T mod k checkpoints so that T = kN."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if traj.T < k:
        raise ValueError("trajectory shorter than one segment")
    T = traj.T - traj.T % k
    return OfflineTrajectory(traj.task_id, traj.policy, traj.sam, traj.states[:T + 1],
                             np.asarray(traj.eval_losses)[:T + 1], traj.batch_seed)


@dataclass
class SubTrajectorySample:
    task_id: int
    m: int
    n: int
    T: int
    theta_m: np.ndarray
    theta_n: np.ndarray
    conditioning: np.ndarray  # unlabeled x, (rows, cols)
    theta_0: np.ndarray
    flags: int = 0

    def __post_init__(self):
        if not 0 <= self.m < self.n <= self.T:
            raise ValueError(f"need 0 <= m < n <= T, got m={self.m} n={self.n} T={self.T}")

    @property
    def dim(self) -> int:
        return self.theta_m.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SubTrajectorySample):
            return NotImplemented
        return ((self.task_id, self.m, self.n, self.T, self.flags)
                == (other.task_id, other.m, other.n, other.T, other.flags)
                and _bits_equal(self.theta_m, other.theta_m)
                and _bits_equal(self.theta_n, other.theta_n)
                and _bits_equal(self.conditioning, other.conditioning)
                and _bits_equal(self.theta_0, other.theta_0))


def _bits_equal(a, b):
    a = np.ascontiguousarray(a, dtype="<f8")
    b = np.ascontiguousarray(b, dtype="<f8")
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def aligned_pairs(T: int, k: int) -> list[tuple[int, int]]:
    top = T - T % k
    idx = range(0, top + 1, k)
    return [(m, n) for m in idx for n in idx if m < n]


def sample_subtrajectories(traj: OfflineTrajectory, count, k, rng, conditioning=None,
                           full_span_prob=0.0) -> list[SubTrajectorySample]:
    """Draw `count` (m, n) pairs uniformly among multiples of k.

    With probability `full_span_prob` a draw is forced to the full span (0, T_k),
    T_k being T rounded down to a multiple of k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if traj.T < k:
        raise ValueError("trajectory shorter than one segment")
    pairs = aligned_pairs(traj.T, k)
    full = (0, traj.T - traj.T % k)
    cond = np.zeros((0, 0)) if conditioning is None else np.asarray(conditioning, dtype=np.float64)
    flags = (FLAG_ADAM if traj.policy == "adam" else 0) | (FLAG_SAM if traj.sam else 0)
    out = []
    for _ in range(count):
        if full_span_prob > 0 and rng.random() < full_span_prob:
            m, n = full
        else:
            m, n = pairs[rng.integers(len(pairs))]
        f = flags | (FLAG_FULL_SPAN if (m, n) == full else 0)
        out.append(SubTrajectorySample(traj.task_id, m, n, traj.T, traj.states[m].copy(),
                                       traj.states[n].copy(), cond, traj.states[0].copy(), f))
    return out


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def record_size(dim: int, rows: int, cols: int) -> int:
    return _RECORD.size + 8 * 2 * dim + _COND.size + 8 * rows * cols + 8 * dim


def encode_store(samples) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(samples))]
    for s in samples:
        cond = np.asarray(s.conditioning, dtype=np.float64)
        if cond.ndim != 2:
            cond = cond.reshape(0, 0) if cond.size == 0 else cond.reshape(1, -1)
        parts.append(_RECORD.pack(s.task_id, s.m, s.n, s.T, s.dim, s.flags))
        parts.append(_f64(s.theta_m))
        parts.append(_f64(s.theta_n))
        parts.append(_COND.pack(*cond.shape))
        parts.append(_f64(cond))
        parts.append(_f64(s.theta_0))
    return b"".join(parts)


def decode_store(buf: bytes) -> list[SubTrajectorySample]:
    view = memoryview(buf)
    if len(buf) < _HEADER.size:
        raise StoreFormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise StoreFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(buf):
            raise StoreFormatError(f"truncated {what}", off)
        chunk = view[off:off + nbytes]
        off += nbytes
        return chunk

    def floats(n, what, shape=None):
        arr = np.frombuffer(take(8 * n, what), dtype="<f8").astype(np.float64)
        return arr if shape is None else arr.reshape(shape)

    out = []
    for _ in range(count):
        start = off
        task_id, m, n, T, dim, flags = _RECORD.unpack(take(_RECORD.size, "record header"))
        theta_m = floats(dim, "theta_m")
        theta_n = floats(dim, "theta_n")
        rows, cols = _COND.unpack(take(_COND.size, "conditioning header"))
        cond = floats(rows * cols, "conditioning", (rows, cols))
        theta_0 = floats(dim, "theta_0")
        try:
            out.append(SubTrajectorySample(task_id, m, n, T, theta_m, theta_n, cond, theta_0, flags))
        except ValueError as exc:
            raise StoreFormatError(str(exc), start) from exc
    if off != len(buf):
        raise StoreFormatError("trailing bytes after last record", off)
    return out


def write_store(path, samples) -> int:
    with open(path, "wb") as fh:
        fh.write(encode_store(samples))
    return len(samples)


def read_store(path) -> list[SubTrajectorySample]:
    with open(path, "rb") as fh:
        return decode_store(fh.read())


# Episode sets use the same little-endian record conventions under their own magic.
_EP_HEADER = struct.Struct("<8sHQ")
_EP_RECORD = struct.Struct("<QIIIIII")


def write_episodes(path, episodes) -> int:
    parts = [_EP_HEADER.pack(EPISODE_MAGIC, VERSION, len(episodes))]
    for ep in episodes:
        dim_x = ep.x_train.shape[1]
        parts.append(_EP_RECORD.pack(ep.task_id, ep.n_classes, dim_x, ep.unlabeled_x.shape[0],
                                     ep.x_train.shape[0], ep.x_eval.shape[0], 0))
        for a in (ep.unlabeled_x, ep.x_train, ep.x_eval):
            parts.append(_f64(a))
        parts.append(np.ascontiguousarray(ep.y_train, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(ep.y_eval, dtype="<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    return len(episodes)


def read_episodes(path):
    from .tasks import Episode

    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _EP_HEADER.size:
        raise StoreFormatError("truncated header", len(buf))
    magic, version, count = _EP_HEADER.unpack_from(buf, 0)
    if magic != EPISODE_MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise StoreFormatError(f"unsupported version {version}", 8)
    off = _EP_HEADER.size
    out = []
    for _ in range(count):
        if off + _EP_RECORD.size > len(buf):
            raise StoreFormatError("truncated episode header", off)
        task_id, n_classes, dim_x, n_u, n_tr, n_ev, _ = _EP_RECORD.unpack_from(buf, off)
        off += _EP_RECORD.size
        arrays = []
        for rows in (n_u, n_tr, n_ev):
            nbytes = 8 * rows * dim_x
            if off + nbytes > len(buf):
                raise StoreFormatError("truncated episode inputs", off)
            arrays.append(np.frombuffer(buf, "<f8", rows * dim_x, off).reshape(rows, dim_x).astype(np.float64))
            off += nbytes
        labels = []
        for rows in (n_tr, n_ev):
            if off + 4 * rows > len(buf):
                raise StoreFormatError("truncated episode labels", off)
            labels.append(np.frombuffer(buf, "<u4", rows, off).astype(np.int64))
            off += 4 * rows
        out.append(Episode(arrays[0], arrays[1], labels[0], arrays[2], labels[1], n_classes, task_id))
    return out
