"""Reverse-mode differentiation over a recorded tape.

A :class:`Tape` records every primitive whose inputs include a tensor that
requires a gradient.  Leaves are parameter tensors (named, created through
:meth:`ParameterStore.tensor`) or constants.  :func:`backward` replays the
tape in reverse and returns a ``{parameter name: gradient}`` map; a parameter
used at several sites (tied embeddings) has its contributions summed.

When no tape is active the same functions simply compute values, so one
forward implementation serves both training and inference.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import numeric
from .numeric import ShapeError


class ContractError(RuntimeError):
    """A documented precondition was violated."""


_state = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive applications; one owner at a time."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise ContractError("a tape is already recording in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    value = numeric.matmul(a.value, b.value)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _record(value, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        )

    return _record(a.value * b.value, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.value)
        out[key] += g
        return (out,)

    return _record(a.value[key], (a,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients are scatter-added."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _record(table.value[ids], (table,), backward)


def pick(x, cols) -> Tensor:
    """``x[i, cols[i]]`` for a 2-d tensor."""
    x = as_tensor(x)
    rows = np.arange(x.shape[0])
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.value)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _record(x.value[rows, cols], (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return _record(value, tensors, backward)


def softmax(x, additive_mask=None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` is a constant added first."""
    x = as_tensor(x)
    pre = x.value if additive_mask is None else x.value + additive_mask
    y = numeric.softmax_rows(pre)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {x.shape[-1]}"
        )
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    value = xhat * gain.value + bias.value

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.value
            gx = inv_std * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain, gbias

    return _record(value, (x, gain, bias), backward)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    return _record(numeric.gelu(x.value), (x,), lambda g: (g * numeric.gelu_grad(x.value),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _record(numeric.relu(x.value), (x,), lambda g: (g * (x.value > 0),))


def log1p_clamp(x) -> Tensor:
    x = as_tensor(x)
    pos = numeric.relu(x.value)

    def backward(g):
        return (g * (x.value > 0) / (1.0 + pos),)

    return _record(np.log1p(pos), (x,), backward)


def masked_max(x, mask, axis: int = -2) -> Tensor:
    """Max over the sequence axis, ignoring positions where ``mask`` is 0."""
    x = as_tensor(x)
    vals, arg = numeric.masked_max(x.value, mask, axis=axis)

    def backward(g):
        out = np.zeros_like(x.value)
        valid = arg >= 0
        ax = axis % x.ndim
        g = np.where(valid, g, 0.0)
        idx = np.expand_dims(np.where(valid, arg, 0), ax)
        np.put_along_axis(out, idx, np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _record(vals, (x,), backward)


def logsumexp(x, axis: int = -1, where=None) -> Tensor:
    x = as_tensor(x)
    value = numeric.logsumexp(x.value, axis=axis, where=where)

    def backward(g):
        pre = x.value if where is None else np.where(where, x.value, -np.inf)
        p = np.exp(pre - np.expand_dims(value, axis))
        return (p * np.expand_dims(g, axis),)

    return _record(value, (x,), backward)


# -- reverse pass -----------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable named leaf reaching it."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    result: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.name is None:
                    continue
                if parent.name in result:
                    result[parent.name] = result[parent.name] + pg
                else:
                    result[parent.name] = np.array(pg, dtype=parent.value.dtype)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


def grad_check(f, params, step: float = 1e-5, samples: int = 50, seed: int = 0,
               fd_dtype=np.longdouble) -> float:
    """Max relative disagreement between :func:`backward` and central differences.

    ``f(store)`` must return a scalar :class:`Tensor` built from
    ``store.tensor(name)`` leaves of the store it is given.  Gradients come from
    one taped pass over ``params`` (64-bit).  The difference quotient
    ``(f(theta+h) - f(theta-h)) / 2h`` is evaluated on a copy of ``params``
    cast to ``fd_dtype``; the x87 extended type keeps cancellation noise well
    below the tolerance for coordinates whose true gradient is tiny.  On
    platforms where ``longdouble`` is plain 64-bit this degrades gracefully.

    For each trainable parameter ``samples`` coordinates (all, if fewer) are
    checked.  The relative error of a coordinate is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    rng = np.random.default_rng(seed)
    for name in params.names():
        if params.trainable[name] and params[name].dtype != np.float64:
            raise ContractError("grad_check requires 64-bit parameters")

    with Tape() as tape:
        loss = as_tensor(f(params))
    if not np.isfinite(loss.value).all():
        raise ContractError("grad_check: objective is not finite")
    analytic = backward(tape, loss)
    del tape

    probe = params.astype(fd_dtype)

    def value_of():
        out = f(probe)
        v = out.value if isinstance(out, Tensor) else np.asarray(out)
        if not np.isfinite(v).all():
            raise ContractError(f"grad_check: objective is not finite ({v})")
        return v.reshape(())[()]

    h = fd_dtype(step)
    worst = 0.0
    for name in params.names():
        if not params.trainable[name]:
            continue
        flat = probe[name].reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        g_ad = analytic.get(name)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = value_of()
            flat[c] = orig - h
            f_minus = value_of()
            flat[c] = orig
            fd = float((f_plus - f_minus) / (2 * h))
            ad_val = 0.0 if g_ad is None else float(g_ad.reshape(-1)[c])
            rel = abs(ad_val - fd) / max(1e-8, abs(ad_val) + abs(fd))
            worst = max(worst, rel)
    return worst
