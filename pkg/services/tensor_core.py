"""Dense float64 tensor primitives with explicit backward formulas.

A ``Tensor`` is a C-ordered ``numpy.ndarray`` of dtype float64; its flat
row-major buffer is the ``data`` sequence and ``shape`` its dimensions. Every
function here is pure: it never mutates its inputs and returns freshly
allocated arrays.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))

Random streams come from ``numpy.random.Generator`` over ``PCG64(seed)``,
whose output is identical on every platform for a given seed.
"""
import math

import numpy as np
from numpy.typing import NDArray

from services.errors import DimensionError, DomainError, NumericalError

Tensor = NDArray[np.float64]
Rng = np.random.Generator

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_SEED_MASK = (1 << 64) - 1


def as_tensor(values) -> Tensor:
    """Copy anything array-like into a contiguous float64 tensor"""
    return np.array(values, dtype=np.float64, order="C", copy=True)


def check_finite(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t)):
        raise NumericalError(f"non-finite values in {name}")
    return t


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(int(seed) & _SEED_MASK))


def derive_seed(seed: int, index: int) -> int:
    """Per-sample seed: base seed XOR sample index, kept in u64 range"""
    return (int(seed) ^ int(index)) & _SEED_MASK


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor, with shape checks.

    Used where the backward pass collapses a batch into one 2-D product; the
    batched per-token products elsewhere use ``@`` directly.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction"""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(y: Tensor, dy: Tensor) -> Tensor:
    """Gradient through softmax given its output y: y * (dy - sum(dy * y))"""
    if y.shape != dy.shape:
        raise DimensionError(f"softmax_backward shape mismatch: {y.shape} vs {dy.shape}")
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS):
    """Normalise the last axis; returns (y, cache) where cache feeds layer_norm_backward"""
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm expects gamma/beta of shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy: Tensor, cache):
    """Closed-form layer-norm gradient; returns (dx, dgamma, dbeta)"""
    xhat, rstd, gamma = cache
    if dy.shape != xhat.shape:
        raise DimensionError(f"layer_norm_backward shape mismatch: {dy.shape} vs {xhat.shape}")
    d = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxhat = dy * gamma
    dx = (rstd / d) * (
        d * dxhat
        - np.sum(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def gelu_backward(x: Tensor, dy: Tensor) -> Tensor:
    if x.shape != dy.shape:
        raise DimensionError(f"gelu_backward shape mismatch: {x.shape} vs {dy.shape}")
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def moments(x: Tensor):
    """Mean and population variance over every entry"""
    if x.size == 0:
        raise DomainError("moments of an empty tensor are undefined")
    mean = float(np.mean(x))
    centered = x - mean
    return mean, float(np.mean(centered * centered))
