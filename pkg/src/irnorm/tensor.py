"""numpy-backed tensors with reverse-mode autodiff and precision emulation.

Everything downstream (norm layers, the restoration model, the training loop)
is built from the primitives in this module.  Three precision modes are
supported:

* ``F64`` -- plain float64 arithmetic,
* ``F32`` -- plain float32 arithmetic,
* ``F16`` -- emulated binary16: every primitive is computed in float32 and its
  result is rounded to the half-precision grid (storage stays float32, but
  every value is exactly representable in IEEE binary16).  Values beyond the
  binary16 range become +/-inf; they propagate and are counted, never clamped.

Design notes
------------
* Tensors are immutable once built.  The single sanctioned exception is the
  optimizer, which updates leaf parameter ``data`` in place between steps.
* Gradients flow through *everything* differentiable, including the mean and
  variance inside normalization layers.
* Reductions use numpy's fixed pairwise order, so repeated evaluation of the
  same graph on the same inputs is bitwise deterministic.
"""

from __future__ import annotations

import contextlib
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Precision",
    "Tensor",
    "NonFiniteCounter",
    "count_nonfinite",
    "cast_precision",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "reshape",
    "transpose",
    "narrow",
    "sum_axes",
    "mean_axes",
    "reduce_stats",
    "sqrt",
    "exp",
    "log",
    "absolute",
    "gelu",
    "softmax_lastdim",
    "gather_rows",
    "conv3x3",
    "finite_difference_grad",
]


class Precision(Enum):
    """Arithmetic mode carried by every tensor."""

    F64 = "f64"
    F32 = "f32"
    F16 = "f16"  # emulated binary16 (float32 storage, half-precision grid)

    @property
    def storage(self) -> np.dtype:
        return np.dtype(np.float64) if self is Precision.F64 else np.dtype(np.float32)


def _quantize(raw: np.ndarray, precision: Precision) -> np.ndarray:
    """Round a raw op result onto the storage grid of ``precision``."""
    if precision is Precision.F64:
        return np.asarray(raw, dtype=np.float64)
    if precision is Precision.F32:
        return np.asarray(raw, dtype=np.float32)
    # Emulated binary16: round-to-nearest-even into the half grid, keep
    # float32 storage.  Op results are already float32 here; float64 enters
    # only through construction/casting, where a single direct rounding is
    # the correct behaviour.  Overflow becomes inf by IEEE rules.
    with np.errstate(over="ignore"):
        return np.asarray(raw).astype(np.float16).astype(np.float32)


class NonFiniteCounter:
    """Tallies non-finite elements observed in op results."""

    def __init__(self) -> None:
        self.count = 0

    def add_from(self, arr: np.ndarray) -> None:
        bad = arr.size - int(np.count_nonzero(np.isfinite(arr)))
        if bad:
            self.count += bad


_COUNTERS: list[NonFiniteCounter] = []


@contextlib.contextmanager
def count_nonfinite():
    """Context manager that records non-finite op outputs produced inside it.

    The count is a tally of encounters: a non-finite value flowing through
    several ops is counted once per op that emits it.
    """
    counter = NonFiniteCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.pop()


def _observe(arr: np.ndarray) -> None:
    if _COUNTERS:
        _COUNTERS[-1].add_from(arr)


class Tensor:
    """Immutable n-d array with an optional autodiff tape entry."""

    __slots__ = ("data", "precision", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, precision: Precision = Precision.F64, requires_grad: bool = False):
        self.data = _quantize(np.array(data, dtype=np.float64, copy=True), precision)
        self.precision = precision
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None

    @classmethod
    def _from_op(
        cls,
        raw: np.ndarray,
        precision: Precision,
        parents: tuple["Tensor", ...],
        grad_fn: Callable | None,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _quantize(raw, precision)
        _observe(out.data)
        out.precision = precision
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.shape}, precision={self.precision.value}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # operator sugar
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.precision), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.precision), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.precision), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.precision), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    # ------------------------------------------------------------------
    # reverse-mode autodiff
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf with requires_grad."""
        if self.size != 1:
            raise ValueError("backward() needs a scalar output, got shape %r" % (self.shape,))
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(value, precision: Precision) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64), precision=precision)


def _check_same_precision(a: Tensor, b: Tensor) -> Precision:
    if a.precision is not b.precision:
        raise ValueError(f"precision mismatch: {a.precision.value} vs {b.precision.value}")
    return a.precision


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b.precision if isinstance(b, Tensor) else Precision.F64)
    b = _as_tensor(b, a.precision)
    prec = _check_same_precision(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(raw, prec, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b.precision if isinstance(b, Tensor) else Precision.F64)
    b = _as_tensor(b, a.precision)
    prec = _check_same_precision(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(raw, prec, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b.precision if isinstance(b, Tensor) else Precision.F64)
    b = _as_tensor(b, a.precision)
    prec = _check_same_precision(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(raw, prec, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b.precision if isinstance(b, Tensor) else Precision.F64)
    b = _as_tensor(b, a.precision)
    prec = _check_same_precision(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._from_op(raw, prec, (a, b), grad_fn)


# ----------------------------------------------------------------------
# linear algebra and shape ops
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    prec = _check_same_precision(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        raw = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(raw, prec, (a, b), grad_fn)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    raw = t.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(t.shape),)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    raw = np.transpose(t.data, axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    axis = axis % t.ndim
    if start < 0 or start + length > t.shape[axis]:
        raise ValueError("narrow out of range")
    index = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(t.ndim))
    raw = t.data[index]

    def grad_fn(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def sum_axes(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, t.ndim)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = t.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, t.shape).copy(),)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def mean_axes(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, t.ndim)
    count = 1
    for a in axes:
        count *= t.shape[a]
    with np.errstate(over="ignore", invalid="ignore"):
        raw = t.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg / count, t.shape).copy(),)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def reduce_stats(t: Tensor, axes=None) -> tuple[Tensor, Tensor]:
    """Population mean and variance over ``axes``, keepdims, differentiable.

    Two-pass: the variance is the mean of squared deviations from the mean,
    dividing by N (population convention).
    """
    mu = mean_axes(t, axes, keepdims=True)
    centered = sub(t, mu)
    var = mean_axes(mul(centered, centered), axes, keepdims=True)
    return mu, var


# ----------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------

def sqrt(t: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        raw = np.sqrt(t.data)
    out = Tensor._from_op(raw, t.precision, (t,), None)

    def grad_fn(g):
        return (g * 0.5 / out.data,)

    out._grad_fn = grad_fn if out.requires_grad else None
    return out


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        raw = np.exp(t.data)
    out = Tensor._from_op(raw, t.precision, (t,), None)

    def grad_fn(g):
        return (g * out.data,)

    out._grad_fn = grad_fn if out.requires_grad else None
    return out


def log(t: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.log(t.data)

    def grad_fn(g):
        return (g / t.data,)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def absolute(t: Tensor) -> Tensor:
    raw = np.abs(t.data)

    def grad_fn(g):
        return (g * np.sign(t.data),)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = t.data
    with np.errstate(over="ignore", invalid="ignore"):
        raw = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        with np.errstate(over="ignore", invalid="ignore"):
            cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            return (g * (cdf + x * pdf),)

    return Tensor._from_op(raw, t.precision, (t,), grad_fn)


def softmax_lastdim(t: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis.

    Treated as one primitive: in emulated-f16 mode the internal max-shift,
    exponentials and sums run in float32 and only the final result is rounded.
    """
    if t.shape[-1] < 1:
        raise ValueError("softmax_lastdim needs a non-empty last axis")
    with np.errstate(over="ignore", invalid="ignore"):
        shifted = t.data - t.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        raw = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._from_op(raw, t.precision, (t,), None)

    def grad_fn(g):
        y = out.data
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    out._grad_fn = grad_fn if out.requires_grad else None
    return out


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-d table by integer index (with scatter-add backward)."""
    if table.ndim != 2:
        raise ValueError("gather_rows expects a 2-d table")
    index = np.asarray(index, dtype=np.int64)
    raw = table.data[index]

    def grad_fn(g):
        acc = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(acc, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (acc,)

    return Tensor._from_op(raw, table.precision, (table,), grad_fn)


# ----------------------------------------------------------------------
# 3x3 convolution (padding 1, stride 1)
# ----------------------------------------------------------------------

def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-size 3x3 convolution: x [B,C,H,W], w [O,C,3,3], b [O]."""
    prec = _check_same_precision(x, w)
    _check_same_precision(w, b)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ValueError(f"conv3x3 shape mismatch: x {x.shape}, w {w.shape}")
    batch, cin, height, width = x.shape
    cout = w.shape[0]
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, cin * 9)
    wmat = w.data.reshape(cout, cin * 9)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = (cols @ wmat.T + b.data).reshape(batch, height, width, cout).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(batch * height * width, cout)
        gw = (g2.T @ cols).reshape(cout, cin, 3, 3)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(batch, height, width, cin, 3, 3)
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, :, di:di + height, dj:dj + width] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        gx = gpad[:, :, 1:1 + height, 1:1 + width]
        return gx, gw, gb

    return Tensor._from_op(raw, prec, (x, w, b), grad_fn)


# ----------------------------------------------------------------------
# precision casting and gradient checking
# ----------------------------------------------------------------------

def cast_precision(t: Tensor, precision: Precision) -> Tensor:
    """Detached copy of ``t`` rounded onto the grid of ``precision``.

    Round-to-nearest-even conversion; values beyond the target format's max
    become +/-inf and any newly non-finite elements are recorded in the
    active non-finite counter.  The result owns its storage even when the
    precision is unchanged.
    """
    return Tensor._from_op(t.data.copy(), precision, (), None)


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    The oracle counterpart to ``backward()``: slow, simple, and independent
    of the tape.
    """
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(Tensor(base, precision=x.precision)))
        flat[i] = orig - h
        down = float(f(Tensor(base, precision=x.precision)))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
