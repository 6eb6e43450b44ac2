"""Dense f32 tensors with a small reverse-mode autodiff tape.

Every value that flows through a model or an intervention graph is a
:class:`TensorValue`: an immutable, row-major float32 array.  Operations are
plain functions.  While a :class:`Tape` is active on the current thread, any
operation with a ``requires_grad`` input is recorded so that :func:`backward`
can replay the tape in reverse.

Arithmetic that is sensitive to summation order (matmul, reductions, softmax,
layer norm, gelu) accumulates in float64 and rounds once to float32.  This
makes row results insensitive to batch size and padding in practice, which the
tracer and the server rely on.

The ``*_shape`` helpers are the single source of truth for shape rules; the
validator calls them directly so that scanning and execution cannot disagree.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import AxisError, GraphError, ShapeError, TensorIndexError

Shape = tuple

_F32 = np.float32
_F64 = np.float64


class TensorValue:
    """Immutable dense float32 tensor.

    Equality is identity: tensors are used as dictionary keys by
    :func:`backward`.  Use :func:`bits_equal` or numpy for value comparison.
    """

    __slots__ = ("_data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_F32, order="C", copy=True)
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "TensorValue":
        # Takes ownership of ``arr``; callers guarantee it is fresh.
        t = object.__new__(cls)
        if type(arr) is not np.ndarray:
            arr = np.array(arr)  # numpy scalars from 0-d reductions
        if arr.dtype != _F32:
            arr = arr.astype(_F32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t._data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def tolist(self):
        return self._data.tolist()

    def flat(self) -> list:
        return self._data.reshape(-1).tolist()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "TensorValue":
        return TensorValue._wrap(self._data, False)

    def as_leaf(self) -> "TensorValue":
        """Same data, marked as a gradient leaf."""
        return TensorValue._wrap(self._data, True)

    def __repr__(self):
        body = np.array2string(self._data, precision=5, separator=", ")
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"TensorValue(shape={self.shape}, {body}{flag})"


def tensor(values, requires_grad: bool = False) -> TensorValue:
    return TensorValue(values, requires_grad)


def scalar(value: float) -> TensorValue:
    return TensorValue(np.float32(value))


def zeros(shape) -> TensorValue:
    return TensorValue._wrap(np.zeros(tuple(shape), _F32))


def ones(shape) -> TensorValue:
    return TensorValue._wrap(np.ones(tuple(shape), _F32))


def full(shape, value: float) -> TensorValue:
    return TensorValue._wrap(np.full(tuple(shape), value, _F32))


def ones_like(t: TensorValue) -> TensorValue:
    return ones(t.shape)


def zeros_like(t: TensorValue) -> TensorValue:
    return zeros(t.shape)


def as_tensor(x) -> TensorValue:
    if isinstance(x, TensorValue):
        return x
    return TensorValue(x)


def bits_equal(a: TensorValue, b: TensorValue) -> bool:
    """Bit-for-bit equality, including NaN payloads and signed zeros."""
    return a.shape == b.shape and a.data.tobytes() == b.data.tobytes()


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: TensorValue
    vjp: Callable  # float64 upstream grad -> tuple of float64 grads (or None)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations executed while it is active."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.remove(self)
        return False

    def __len__(self):
        return len(self.entries)


class no_tape:
    """Suspend recording on this thread."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack()[:] = self._saved
        return False


def _result(op: str, inputs: tuple, arr: np.ndarray, vjp: Callable | None) -> TensorValue:
    tape = active_tape()
    if tape is not None and vjp is not None and any(t.requires_grad for t in inputs):
        out = TensorValue._wrap(arr, True)
        tape.entries.append(TapeEntry(op, inputs, out, vjp))
        return out
    return TensorValue._wrap(arr, False)


def backward(loss: TensorValue, tape: Tape) -> dict:
    """Reverse-mode sweep over ``tape`` starting from scalar ``loss``.

    Returns a dict mapping every ``requires_grad`` tensor that received a
    gradient (leaves and intermediates) to that gradient.
    """
    if loss.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    start = None
    for i in range(len(tape.entries) - 1, -1, -1):
        if tape.entries[i].output is loss:
            start = i
            break
    if start is None:
        raise GraphError("loss was not produced by an operation on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), _F64)}
    owners: dict[int, TensorValue] = {id(loss): loss}
    for entry in reversed(tape.entries[: start + 1]):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, _F64)
                owners[key] = inp
    return {owners[k]: TensorValue._wrap(np.asarray(v, _F64).astype(_F32)) for k, v in grads.items()}


# ---------------------------------------------------------------------------
# Shape rules
# ---------------------------------------------------------------------------


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple:
    """Trailing-dimension broadcasting; size-1 dimensions stretch."""
    a, b = tuple(a), tuple(b)
    if a == b:
        return a
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")
    return tuple(reversed(out))


def broadcast_to_shape(src: Sequence[int], dst: Sequence[int]) -> tuple:
    """Check that ``src`` stretches onto ``dst`` without changing ``dst``."""
    src, dst = tuple(src), tuple(dst)
    if len(src) > len(dst):
        raise ShapeError(f"value of shape {src} does not fit region {dst}")
    for i in range(1, len(src) + 1):
        if src[-i] != dst[-i] and src[-i] != 1:
            raise ShapeError(f"value of shape {src} does not fit region {dst}")
    return dst


def normalize_axis(axis: int, rank: int) -> int:
    if isinstance(axis, bool) or not isinstance(axis, (int, np.integer)):
        raise AxisError(f"axis must be an integer, got {axis!r}")
    if not -rank <= axis < rank:
        raise AxisError(f"axis {axis} out of range for rank {rank}")
    return int(axis) % rank


def matmul_shape(a: Sequence[int], b: Sequence[int]) -> tuple:
    a, b = tuple(a), tuple(b)
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a} and {b}")
    if len(b) > 2 and b[:-2] != a[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a} vs {b}")
    if a[-1] != b[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a} @ {b}")
    return a[:-1] + (b[-1],)


def reduce_shape(shape: Sequence[int], axis, kind: str = "sum") -> tuple:
    shape = tuple(shape)
    if axis is None:
        if kind in ("argmax", "mean") and math.prod(shape) == 0:
            raise ShapeError(f"{kind} of an empty tensor")
        return ()
    ax = normalize_axis(axis, len(shape))
    if kind == "argmax" and math.prod(shape) == 0:
        raise ShapeError(f"argmax over empty tensor of shape {shape}")
    if kind == "mean" and shape[ax] == 0:
        raise ShapeError(f"mean over empty axis {ax} of shape {shape}")
    return shape[:ax] + shape[ax + 1 :]


def reshape_shape(shape: Sequence[int], new: Sequence[int]) -> tuple:
    shape = tuple(shape)
    new = tuple(int(d) for d in new)
    total = math.prod(shape)
    if new.count(-1) > 1 or any(d < -1 for d in new):
        raise ShapeError(f"invalid target shape {new}")
    if -1 in new:
        known = math.prod(d for d in new if d != -1)
        if known == 0 or total % known:
            raise ShapeError(f"cannot reshape {shape} into {new}")
        new = tuple(total // known if d == -1 else d for d in new)
    if math.prod(new) != total:
        raise ShapeError(f"cannot reshape {shape} into {new}")
    return new


def layer_norm_shape(a: Sequence[int], gain: Sequence[int], bias: Sequence[int]) -> tuple:
    a = tuple(a)
    if not a:
        raise ShapeError("layer_norm needs rank >= 1")
    if tuple(gain) != a[-1:] or tuple(bias) != a[-1:]:
        raise ShapeError(f"layer_norm gain/bias {tuple(gain)}/{tuple(bias)} do not match last dim of {a}")
    return a


# ---------------------------------------------------------------------------
# Index expressions
# ---------------------------------------------------------------------------
#
# An index expression is a sequence of terms, one per leading axis: an int
# (selects and drops the axis), a slice, or a list of ints (selects, keeps the
# axis).  Terms apply independently per axis ("orthogonal" indexing).  Missing
# trailing terms select the whole axis.  At the top level a list or tuple is the
# sequence of terms, so an int-list term must be nested: ``[slice(None), [3, 5]]``.


def normalize_index(index) -> tuple:
    if not isinstance(index, (tuple, list)):
        index = (index,)
    terms = []
    for term in index:
        if _is_int(term):
            terms.append(int(term))
        elif isinstance(term, slice):
            for part in (term.start, term.stop, term.step):
                if part is not None and not _is_int(part):
                    raise TensorIndexError(f"slice bounds must be integers, got {term}")
            if term.step == 0:
                raise TensorIndexError("slice step cannot be zero")
            terms.append(slice(
                None if term.start is None else int(term.start),
                None if term.stop is None else int(term.stop),
                None if term.step is None else int(term.step),
            ))
        elif isinstance(term, (list, tuple, np.ndarray)):
            items = list(np.asarray(term).reshape(-1).tolist()) if isinstance(term, np.ndarray) else list(term)
            if not all(_is_int(x) for x in items):
                raise TensorIndexError(f"index lists must hold integers, got {term!r}")
            terms.append([int(x) for x in items])
        else:
            raise TensorIndexError(f"unsupported index term {term!r}")
    return tuple(terms)


def _is_int(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, (bool, np.bool_))


def _resolve_index(shape: tuple, terms: tuple):
    """Bounds-check ``terms`` against ``shape``.

    Returns (numpy key, selected shape, region shape, fancy) where region shape
    keeps int-selected axes as size 1.
    """
    if len(terms) > len(shape):
        raise TensorIndexError(f"{len(terms)} index terms for rank-{len(shape)} tensor")
    fancy = any(isinstance(t, list) for t in terms)
    key, selected, region, arrays = [], [], [], []
    for axis, term in enumerate(terms):
        n = shape[axis]
        if isinstance(term, int):
            if not -n <= term < n:
                raise TensorIndexError(f"index {term} out of bounds for axis {axis} of size {n}")
            v = term % n
            key.append(v)
            region.append(1)
            arrays.append(np.array([v], dtype=np.intp))
        elif isinstance(term, slice):
            r = range(*term.indices(n))
            key.append(term)
            selected.append(len(r))
            region.append(len(r))
            arrays.append(np.arange(r.start, r.stop, r.step, dtype=np.intp))
        else:
            for v in term:
                if not -n <= v < n:
                    raise TensorIndexError(f"index {v} out of bounds for axis {axis} of size {n}")
            vals = np.array([v % n for v in term], dtype=np.intp)
            selected.append(len(vals))
            region.append(len(vals))
            arrays.append(vals)
    rest = tuple(shape[len(terms):])
    selected = tuple(selected) + rest
    region = tuple(region) + rest
    if fancy:
        arrays += [np.arange(d, dtype=np.intp) for d in rest]
        return np.ix_(*arrays), selected, region, True
    return tuple(key), selected, region, False


def index_shape(shape: Sequence[int], index) -> tuple:
    return _resolve_index(tuple(shape), normalize_index(index))[1]


def index_set_shape(shape: Sequence[int], index, value_shape: Sequence[int]) -> tuple:
    selected = _resolve_index(tuple(shape), normalize_index(index))[1]
    broadcast_to_shape(value_shape, selected)
    return tuple(shape)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _f64(t: TensorValue) -> np.ndarray:
    return t.data.astype(_F64)


def add(a: TensorValue, b: TensorValue) -> TensorValue:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: TensorValue, b: TensorValue) -> TensorValue:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: TensorValue, b: TensorValue) -> TensorValue:
    broadcast_shape(a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(g * _f64(b), a.shape), _unbroadcast(g * _f64(a), b.shape))

    return _result("mul", (a, b), a.data * b.data, vjp)


def div(a: TensorValue, b: TensorValue) -> TensorValue:
    broadcast_shape(a.shape, b.shape)

    def vjp(g):
        bb = _f64(b)
        return (_unbroadcast(g / bb, a.shape), _unbroadcast(-g * _f64(a) / (bb * bb), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _result("div", (a, b), out, vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: TensorValue) -> TensorValue:
    x = _f64(a)

    def vjp(g):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result("gelu", (a,), 0.5 * x * (1.0 + erf(x * _INV_SQRT2)), vjp)


def relu(a: TensorValue) -> TensorValue:
    x = a.data
    return _result("relu", (a,), np.maximum(x, _F32(0)),
                   lambda g: (g * (x > 0),))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"gelu": gelu, "relu": relu}


def elementwise(kind: str, a: TensorValue, b: TensorValue | None = None) -> TensorValue:
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def matmul(a: TensorValue, b: TensorValue) -> TensorValue:
    matmul_shape(a.shape, b.shape)
    x, w = _f64(a), _f64(b)

    def vjp(g):
        if w.ndim == 2:
            gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gw = np.swapaxes(x, -1, -2) @ g
        return (g @ np.swapaxes(w, -1, -2), gw)

    return _result("matmul", (a, b), x @ w, vjp)


def softmax(a: TensorValue, axis: int = -1) -> TensorValue:
    ax = normalize_axis(axis, a.ndim)
    x = _f64(a)
    if x.size == 0:
        return _result("softmax", (a,), x, lambda g: (g,))
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _result("softmax", (a,), y, vjp)


def layer_norm(a: TensorValue, gain: TensorValue, bias: TensorValue, eps: float = 1e-5) -> TensorValue:
    layer_norm_shape(a.shape, gain.shape, bias.shape)
    x = _f64(a)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gw = _f64(gain)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gw
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _result("layer_norm", (a, gain, bias), xhat * gw + _f64(bias), vjp)


def index_get(a: TensorValue, index) -> TensorValue:
    key, selected, region, fancy = _resolve_index(a.shape, normalize_index(index))
    out = np.array(a.data[key], dtype=_F32).reshape(selected)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape, _F64)
        if fancy:
            np.add.at(ga, key, g.reshape(region))
        else:
            ga[key] += g.reshape(ga[key].shape)
        return (ga,)

    return _result("index_get", (a,), out, vjp)


def index_set(a: TensorValue, index, v: TensorValue) -> TensorValue:
    """Copy of ``a`` with the indexed region overwritten by broadcast ``v``."""
    key, selected, region, fancy = _resolve_index(a.shape, normalize_index(index))
    broadcast_to_shape(v.shape, selected)
    out = a.data.copy()
    fill = np.broadcast_to(v.data, selected)
    if fancy:
        out[key] = fill.reshape(region)
    else:
        out[key] = fill.reshape(out[key].shape)
    vshape = v.shape

    def vjp(g):
        ga = g.copy()
        ga[key] = 0.0
        gv = np.asarray(g[key]).reshape(selected)
        return (ga, _unbroadcast(gv, vshape))

    return _result("index_set", (a, v), out, vjp)


def reduce(kind: str, a: TensorValue, axis=None) -> TensorValue:
    if kind not in ("sum", "mean", "argmax"):
        raise ValueError(f"unknown reduction {kind!r}")
    out_shape = reduce_shape(a.shape, axis, kind)
    x = _f64(a)
    if kind == "argmax":
        # np.argmax returns the first maximal index, which is the tie-break we want
        idx = np.argmax(x) if axis is None else np.argmax(x, axis=axis)
        return TensorValue._wrap(np.asarray(idx, dtype=_F32).reshape(out_shape))
    shape = a.shape
    if kind == "sum":
        out = x.sum() if axis is None else x.sum(axis=axis)
        scale = 1.0
    else:
        out = x.mean() if axis is None else x.mean(axis=axis)
        scale = 1.0 / (math.prod(shape) if axis is None else shape[normalize_axis(axis, len(shape))])

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * scale, shape).copy(),)
        ax = normalize_axis(axis, len(shape))
        return (np.broadcast_to(np.expand_dims(g * scale, ax), shape).copy(),)

    return _result(kind, (a,), np.asarray(out).reshape(out_shape), vjp)


def sum(a: TensorValue, axis=None) -> TensorValue:  # noqa: A001 - mirrors the op name
    return reduce("sum", a, axis)


def mean(a: TensorValue, axis=None) -> TensorValue:
    return reduce("mean", a, axis)


def argmax(a: TensorValue, axis=None) -> TensorValue:
    return reduce("argmax", a, axis)


def reshape(a: TensorValue, shape) -> TensorValue:
    new = reshape_shape(a.shape, shape)
    old = a.shape
    return _result("reshape", (a,), a.data.reshape(new).copy(), lambda g: (g.reshape(old),))


def transpose(a: TensorValue, axes: Sequence[int]) -> TensorValue:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AxisError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _result("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inv),))


def embedding(table: TensorValue, ids: np.ndarray) -> TensorValue:
    """Gather rows of ``table``; ``ids`` is an integer array (not differentiable)."""
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]

    def vjp(g):
        gt = np.zeros((vocab,) + g.shape[ids.ndim:], _F64)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result("embedding", (table,), table.data[ids], vjp)


def masked_fill(a: TensorValue, mask: np.ndarray, value: float) -> TensorValue:
    """Replace entries where boolean ``mask`` (broadcastable) is True."""
    mask = np.asarray(mask, dtype=bool)
    broadcast_to_shape(mask.shape, a.shape)
    keep = ~mask
    return _result("masked_fill", (a,), np.where(mask, _F32(value), a.data),
                   lambda g: (g * keep,))
