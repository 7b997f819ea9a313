"""Deterministic numeric kernel.

Tensors are plain ``numpy`` float64 arrays. Every function here returns a new
array and never mutates its input.

The random stream comes from numpy's Philox counter-based bit generator, so a
seed fixes every draw independent of platform or thread count.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError

GELU_TANH_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

ACTIVATIONS = ("relu", "gelu", "silu")


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected rank-{ndim} tensor, got shape {arr.shape}")
    return arr


class Rng:
    """Seeded random source (Philox-4x64)."""

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ParameterError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return rng_normal(self, shape, mean, std)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream, reproducible from (seed, offset)."""
        return Rng((self.seed * 1_000_003 + offset) % (2**63))


def rng_normal(rng: Rng, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    shape = tuple(int(s) for s in shape)
    if std == 0:
        return np.full(shape, float(mean))
    return mean + std * rng.generator.standard_normal(shape)


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = as_tensor(logits)
    if z.size == 0:
        raise ShapeError("softmax of an empty tensor")
    if temperature != 1.0:
        z = z / temperature
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


def topk(values, k: int) -> tuple[list[int], list[float]]:
    """Indices and values of the ``k`` largest entries of a rank-1 tensor.

    Ties go to the lowest index.
    """
    v = as_tensor(values, ndim=1)
    if not 1 <= k <= v.shape[0]:
        raise ParameterError(f"k must be in [1, {v.shape[0]}], got {k}")
    idx = topk_indices(v[None, :], k)[0]
    return idx.tolist(), v[idx].tolist()


def topk_indices(rows: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k over the last axis, sorted descending, ties -> lowest index."""
    n = rows.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negated values keeps lower indices first among equals
    order = np.argsort(-rows, axis=-1, kind="stable")
    return order[..., :k]


def l2_normalize(v, epsilon: float = 1e-12, axis: int = -1) -> np.ndarray:
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    return v / np.maximum(norm, epsilon)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(v, kind: str = "gelu") -> np.ndarray:
    """Elementwise nonlinearity.

    ``gelu`` is the tanh approximation
    ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.
    """
    x = as_tensor(v)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "silu":
        return x * sigmoid(x)
    if kind == "gelu":
        t = x * x
        t *= GELU_TANH_COEF
        t += 1.0
        t *= x
        t *= _SQRT_2_OVER_PI
        np.tanh(t, out=t)
        t += 1.0
        t *= x
        t *= 0.5
        return t
    raise ParameterError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise derivative of :func:`activation` at ``x``."""
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "silu":
        s = sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    if kind == "gelu":
        u = _SQRT_2_OVER_PI * (x + GELU_TANH_COEF * x**3)
        t = np.tanh(u)
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_TANH_COEF * x**2)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    raise ParameterError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
