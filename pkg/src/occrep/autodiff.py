"""Reverse-mode automatic differentiation over dense numpy arrays.

Every forward operation records its parents and a backward closure on the
output tensor; calling :meth:`Tensor.backward` walks that tape in reverse
topological order, visiting each node once.

Data is stored as 32-bit reals by default. Use :func:`precision` to switch
the default (the gradient checks run in 64-bit).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "precision",
    "no_grad",
    "tensor",
    "zeros",
    "concat",
    "stack",
    "where",
    "segment_max",
    "segment_sum",
    "check_gradient",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def default_dtype():
    return _DTYPE


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is None:
        dtype = _DTYPE
    if arr.dtype != dtype and (arr.dtype.kind in "fiub" or arr.dtype == object):
        arr = arr.astype(dtype)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a finite sum proves every entry finite; only overflowing sums need the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite output in {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def _broadcast_shape(*shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


class Tensor:
    """A node on the tape: an array, its gradient, and how it was made."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward --------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _check_finite(np.asarray(pg, dtype=parent.data.dtype), f"{node._op} backward")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        _broadcast_shape(a, b)
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        _broadcast_shape(a, b)
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        _broadcast_shape(x.shape, y.shape)
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        _broadcast_shape(x.shape, y.shape)
        return Tensor._make(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._make(
            x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),), "pow"
        )

    def __matmul__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        if x.ndim < 1 or y.ndim < 1 or x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
            raise ShapeError(f"matmul shape mismatch {x.shape} @ {y.shape}")
        if x.ndim != 2 or y.ndim != 2:
            raise ShapeError("matmul supports 2-D operands only")

        def backward(g):
            return g @ y.T, x.T @ g

        return Tensor._make(x @ y, (self, other), backward, "matmul")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis: int | None = None, keepdims: bool = False):
        """Max-reduce; the gradient goes to the first maximal entry."""
        x = self.data
        if axis is None:
            flat = int(np.argmax(x))
            out = np.asarray(x.reshape(-1)[flat])

            def backward(g):
                grad = np.zeros(x.size, dtype=x.dtype)
                grad[flat] = g
                return (grad.reshape(x.shape),)

            return Tensor._make(out, (self,), backward, "max")

        axis = axis % x.ndim
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, idx, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.zeros_like(x)
            np.put_along_axis(grad, idx, g, axis=axis)
            return (grad,)

        return Tensor._make(out, (self,), backward, "max")

    def prod(self, axis: int):
        """Product along ``axis``; backward uses prefix/suffix products (zero safe)."""
        x = self.data
        axis = axis % x.ndim
        out = np.prod(x, axis=axis)

        def backward(g):
            ones_shape = list(x.shape)
            ones_shape[axis] = 1
            ones = np.ones(ones_shape, dtype=x.dtype)
            prefix = np.concatenate([ones, np.cumprod(x, axis=axis)], axis=axis)
            rev = np.flip(x, axis=axis)
            suffix = np.flip(np.concatenate([ones, np.cumprod(rev, axis=axis)], axis=axis), axis=axis)
            n = x.shape[axis]
            left = np.take(prefix, np.arange(n), axis=axis)
            right = np.take(suffix, np.arange(1, n + 1), axis=axis)
            return (np.expand_dims(g, axis) * left * right,)

        return Tensor._make(out, (self,), backward, "prod")

    # -- unary functions -------------------------------------------------------

    def exp(self):
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return Tensor._make(out, (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        out = special.expit(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def erf(self):
        x = self.data
        out = _erf(x)
        return Tensor._make(out, (self,), lambda g: (g * _erf_grad(x),), "erf")

    def clip(self, lo: float, hi: float):
        """Clamp values; entries outside [lo, hi] get zero gradient."""
        x = self.data
        out = np.clip(x, lo, hi)
        inside = (x >= lo) & (x <= hi)
        return Tensor._make(out, (self,), lambda g: (g * inside,), "clip")

    def softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted.astype(np.float64))
        out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

        def backward(g):
            dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64)
            return (out * (g - dot),)

        return Tensor._make(out, (self,), backward, "softmax")

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        return Tensor._make(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    @property
    def T(self):
        return self.transpose()

    def broadcast_to(self, shape):
        src = self.shape
        _broadcast_shape(src, tuple(shape))
        out = np.broadcast_to(self.data, shape).copy()
        return Tensor._make(out, (self,), lambda g: (_unbroadcast(g, src),), "broadcast")

    def expand_dims(self, axis: int):
        return self.reshape(np.expand_dims(self.data, axis).shape)

    def __getitem__(self, index):
        x = self.data
        out = x[index]
        if not isinstance(out, np.ndarray):
            out = np.asarray(out)

        def backward(g):
            grad = np.zeros_like(x)
            np.add.at(grad, index, g)
            return (grad,)

        return Tensor._make(out.copy(), (self,), backward, "slice")

    def take(self, indices, axis: int = 0):
        """Gather along ``axis``; repeated indices accumulate gradient."""
        x = self.data
        indices = np.asarray(indices, dtype=np.int64)
        axis = axis % x.ndim
        out = np.take(x, indices, axis=axis)

        def backward(g):
            grad = np.zeros_like(x)
            moved = np.moveaxis(grad, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
            return (grad,)

        return Tensor._make(out, (self,), backward, "take")


# -- erf ---------------------------------------------------------------------

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def _erf(x: np.ndarray) -> np.ndarray:
    return special.erf(x.astype(np.float64)).astype(x.dtype)


def _erf_grad(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (_TWO_OVER_SQRT_PI * np.exp(-x64 * x64)).astype(x.dtype)


# -- free functions ------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return [
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        ]

    return Tensor._make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.expand_dims(axis) for t in tensors], axis=axis)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    sa, sb = a.shape, b.shape
    out = np.where(mask, a.data, b.data)
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * ~mask, sb)),
        "where",
    )


def segment_max(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Row-wise max of ``values`` grouped by ``segment_ids``.

    Empty segments yield zeros. Ties send the gradient to the first row (in
    input order) attaining the maximum.
    """
    x = values.data
    ids = np.asarray(segment_ids, dtype=np.int64)
    width = x.shape[1:]
    out = np.zeros((num_segments,) + width, dtype=x.dtype)
    if len(ids) == 0:
        return Tensor._make(out, (values,), lambda g: (np.zeros_like(x),), "segment_max")
    # stable sort keeps input order inside each segment, so argmax picks the first
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    present = sorted_ids[starts]
    sorted_x = x[order]
    red = np.maximum.reduceat(sorted_x, starts, axis=0)
    out[present] = red
    # winner row per (segment, column)
    counts = np.diff(np.r_[starts, len(ids)])
    seg_of_row = np.repeat(np.arange(len(starts)), counts)
    is_max = sorted_x == red[seg_of_row]
    row_pos = np.where(is_max, np.arange(len(ids)).reshape((-1,) + (1,) * len(width)), len(ids))
    first = np.minimum.reduceat(row_pos, starts, axis=0)
    winners = order[first]

    def backward(g):
        grad = np.zeros_like(x)
        cols = np.indices(winners.shape)[1:]
        np.add.at(grad, (winners, *cols), g[present])
        return (grad,)

    return Tensor._make(out, (values,), backward, "segment_max")


def segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    x = values.data
    ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, ids, x)
    out = out.astype(x.dtype)
    return Tensor._make(out, (values,), lambda g: (g[ids],), "segment_sum")


def check_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, indices: Iterable | None = None) -> float:
    """Max elementwise relative error between reverse-mode and central differences.

    ``f`` maps a tensor to a scalar tensor. The comparison runs in 64-bit;
    the relative error denominator is ``max(|g_ad|, |g_fd|, 1e-6)``.
    ``indices`` restricts the finite-difference probes to a subset of flat
    positions.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        out.backward()
        g_ad = np.zeros_like(base) if xt.grad is None else xt.grad.astype(np.float64)

        flat = base.reshape(-1)
        positions = range(flat.size) if indices is None else indices
        worst = 0.0
        with no_grad():
            for i in positions:
                saved = flat[i]
                flat[i] = saved + h
                fp = float(f(Tensor(base.copy())).data)
                flat[i] = saved - h
                fm = float(f(Tensor(base.copy())).data)
                flat[i] = saved
                g_fd = (fp - fm) / (2.0 * h)
                ga = g_ad.reshape(-1)[i]
                err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-6)
                worst = max(worst, err)
    return worst
