"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive used by the encoder and heads lives here.
Forward values are plain numpy arrays; when a :class:`Tape` is active and any
input requires a gradient, the op appends a backward closure to the tape.

    >>> x = Tensor(np.array([3.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(mul(x, x))
    >>> tape.backward(y)
    >>> x.grad
    array([6.])

Broadcasting is deliberately narrow: only :func:`bias_add`, a 2-D right-hand
operand in :func:`matmul`, and the constant mask in :func:`softmax` broadcast.
Everything else demands equal shapes.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-12
# tanh approximation of gelu
GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense float array that can participate in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`.

    Use as a context manager; ops executed inside the block are recorded.
    A tape can be replayed once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor, inputs: Sequence[Tensor] = ()):
        """Populate ``.grad`` of every tensor that ``loss`` depends on.

        Gradients accumulate into existing ``.grad`` buffers. Tensors listed in
        ``inputs`` that received no gradient get explicit zeros.
        """
        if self.consumed:
            raise TapeError("backward called on a consumed tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for out, ins, fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(ins, grads):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g
        self._records = []
        for t in inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


_TAPES: list[Tape] = []


def backward(loss: Tensor, tape: Tape, inputs: Sequence[Tensor] = ()):
    tape.backward(loss, inputs)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: cannot add bias {b.shape} to {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has exactly
    ``a``'s leading axes. A 1-D ``a`` is treated as a single row.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), back)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from e
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[u.shape for u in tensors]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _emit("slice", x.data[index], (x,), back)


def select(x: Tensor, i: int, axis: int = 0) -> Tensor:
    """Pick index ``i`` along ``axis``, dropping that axis."""
    part = slice_axis(x, i, i + 1, axis)
    return reshape(part, part.shape[: axis % x.ndim] + part.shape[axis % x.ndim + 1:])


# ---------------------------------------------------------------- nonlinear


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, max-subtracted.

    ``mask`` (bool, broadcastable to ``x``) marks admissible entries; the
    others get probability exactly 0. At least one entry per row must be
    admissible.
    """
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: gain/shift {gain.shape}/{shift.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gd + shift.data, (x, gain, shift), back)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    t = np.tanh(GELU_SCALE * (xd + GELU_COEF * xd ** 3))

    def back(g):
        dt = (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _emit("gelu", 0.5 * xd * (1.0 + t), (x,), back)


def gelu_scalar(v: float) -> float:
    return 0.5 * v * (1.0 + math.tanh(GELU_SCALE * (v + GELU_COEF * v ** 3)))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("embedding", table.data[ids], (table,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, gold: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``gold`` under softmax(``logits``)."""
    gold = np.asarray(gold)
    if logits.ndim != 2 or gold.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs gold {gold.shape}")
    n = logits.shape[0]
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, gold].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, gold] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               num_coords: int | None = None, rng: np.random.Generator | None = None,
               atol: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps ``x`` to a scalar tensor. With ``num_coords`` set, only that
    many randomly chosen coordinates are compared. The error is
    ``|a - n| / max(|a|, |n|, atol)``: central differences carry roundoff of
    order ``eps * |f| / h`` (about 1e-10 here), so entries far below ``atol``
    are held to an absolute rather than a relative bound.
    """
    first = float(f(x).data)
    if float(f(x).data) != first:
        raise ValueError("grad_check: f is not deterministic (dropout active?)")

    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss, inputs=[x])
    analytic = x.grad.reshape(-1).copy()
    x.grad, x.requires_grad = saved_grad, saved_flag

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if num_coords is not None and num_coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=num_coords, replace=False)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x).data)
        flat[i] = orig - h
        down = float(f(x).data)
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), atol)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
