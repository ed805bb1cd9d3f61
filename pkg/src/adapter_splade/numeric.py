"""Dense kernels over numpy arrays.

Every function here is pure: it never mutates its inputs and never records
anything.  The differentiable wrappers in :mod:`adapter_splade.autodiff` call
into these for their forward values.

Arrays may carry leading batch axes; "rows" always means the last axis.
"""

from __future__ import annotations

import math

import numpy as np

GELU_COEF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {x.shape[-1]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * x * (1.0 + GELU_COEF * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(SQRT_2_OVER_PI * x * (1.0 + GELU_COEF * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (
        1.0 + 3.0 * GELU_COEF * x2
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0.0)


def log1p_clamp(x: np.ndarray) -> np.ndarray:
    """log(1 + max(0, x)), the saturation applied to term logits."""
    return np.log1p(relu(x))


def masked_max(x: np.ndarray, mask: np.ndarray | None = None, axis: int = -2):
    """Max over ``axis`` restricted to positions where ``mask`` is nonzero.

    ``mask`` has the shape of ``x`` without its last axis (one flag per
    position).  Returns ``(values, argmax)``; ties keep the first position
    and fully masked slices yield 0 with argmax -1.  Implemented as a running
    max over positions so every pass reads a contiguous slice.
    """
    x = np.asarray(x)
    ax = axis % x.ndim
    if ax != x.ndim - 2:
        raise ValueError("masked_max reduces the position axis (second to last)")
    n = x.shape[ax]
    out_shape = x.shape[:ax] + x.shape[ax + 1 :]
    best = np.full(out_shape, -np.inf, dtype=x.dtype)
    arg = np.full(out_shape, -1, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask) != 0
    better = np.empty(out_shape, dtype=bool)
    for i in range(n):
        xi = x[..., i, :]
        np.greater(xi, best, out=better)
        if mask is not None:
            better &= mask[..., i, None]
        np.copyto(best, xi, where=better)
        np.copyto(arg, i, where=better)
    best[arg < 0] = 0.0
    return best, arg


def logsumexp(x: np.ndarray, axis: int = -1, where: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x)
    if where is not None:
        x = np.where(where, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return out.squeeze(axis)
