"""Small dense networks with hand-derived gradients, plus seeded RNG helpers.

Parameters live in one flat float64 vector. Each layer contributes a weight
block of shape (fan_in, fan_out), stored row-major, followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu")
OUTPUTS = ("logits", "scalar")


class DimensionError(ValueError):
    """Raised when an array does not have the size an operation expects."""

    def __init__(self, what: str, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output: str = "logits"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output kind {self.output!r}")
        if self.output == "scalar" and widths[-1] != 1:
            raise ValueError("scalar output requires a final width of 1")

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    def unflatten(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or params.shape[0] != self.n_params:
            raise DimensionError("parameter vector", self.n_params, params.shape)
        layers = []
        offset = 0
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = params[offset:offset + a * b].reshape(a, b)
            offset += a * b
            bias = params[offset:offset + b]
            offset += b
            layers.append((W, bias))
        return layers

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for W, b in layers:
            parts.append(np.asarray(W, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64).ravel())
        flat = np.concatenate(parts) if parts else np.zeros(0)
        if flat.shape[0] != self.n_params:
            raise DimensionError("flattened layers", self.n_params, flat.shape[0])
        return flat


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _check_inputs(spec: MlpSpec, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise DimensionError("input matrix columns", spec.n_in, x.shape)
    return x


def _forward_cached(spec, params, inputs):
    layers = spec.unflatten(params)
    x = _check_inputs(spec, inputs)
    acts = [x]
    pre = []
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        h = z if i == len(layers) - 1 else _act(spec.activation, z)
        acts.append(h)
    return layers, pre, acts


def mlp_forward(spec: MlpSpec, params, inputs) -> np.ndarray:
    """Rows of `inputs` are samples; returns one output row per sample."""
    return _forward_cached(spec, params, inputs)[2][-1]


def mlp_forward_with_cache(spec: MlpSpec, params, inputs):
    """Forward pass that also returns the activations needed by `mlp_vjp_from_cache`."""
    cache = _forward_cached(spec, params, inputs)
    return cache[2][-1], cache


def mlp_vjp(spec: MlpSpec, params, inputs, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Pull `grad_out` (d loss / d output) back to (d params, d inputs)."""
    return mlp_vjp_from_cache(spec, _forward_cached(spec, params, inputs), grad_out)


def mlp_vjp_from_cache(spec: MlpSpec, cache, grad_out) -> tuple[np.ndarray, np.ndarray]:
    layers, pre, acts = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise DimensionError("output gradient", acts[-1].shape, g.shape)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i != len(layers) - 1:
            g = g * _act_grad(spec.activation, pre[i], acts[i + 1])
        grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ W.T
    grads.reverse()
    return spec.flatten(grads), g


def mlp_backward(spec: MlpSpec, params, inputs, loss_grad_at_output) -> np.ndarray:
    return mlp_vjp(spec, params, inputs, loss_grad_at_output)[0]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); same seed, same stream."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams for parallel workers."""
    children = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def gaussian_sample(rng: np.random.Generator, dim: int) -> np.ndarray:
    if dim <= 0:
        raise ValueError(f"dim must be positive, got {dim}")
    return rng.standard_normal(dim)
