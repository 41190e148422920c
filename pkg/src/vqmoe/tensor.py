"""Dense tensors plus a reverse-mode differentiation tape.

Forward arithmetic runs on NumPy arrays (float32 or float64, row-major
contiguous). While a :class:`Tape` is active, every primitive records a
backward rule; :func:`backward` then replays the records in reverse to
accumulate gradients of a scalar loss with respect to any tensor that
contributed to it.

Reductions (sums, means, softmax normalizers) accumulate their operands in
sorted value order. That makes reduction results invariant to permutations
along the reduced axes, which the routing-equivariance guarantees of the
mixture-of-experts layers depend on bit-for-bit.

Every operation verifies that its output is finite and raises
:class:`~vqmoe.errors.NumericalError` otherwise; NaN/Inf is never returned
silently.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

DTYPES = {"float32": np.float32, "float64": np.float64}

_ids = itertools.count()


def resolve_dtype(dtype) -> np.dtype:
    """Map a dtype name or numpy dtype to one of the two supported dtypes."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """A dense n-dimensional array with positive extents.

    Tensors are treated as immutable once built; only an optimizer that owns
    a parameter may update ``data`` in place, and never while a forward or
    backward pass over that parameter is running.
    """

    __slots__ = ("data", "tid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"zero or negative extent in shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError("tensor constructed from non-finite values")
        self.data = _contiguous(arr)
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # Arithmetic sugar; scalars are promoted to constants of matching dtype.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self, dtype_hint=self.dtype)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self, dtype_hint=self.dtype)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it as one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


# ---------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("op", "out_tid", "input_tids", "backward_fn")

    def __init__(self, op, out_tid, input_tids, backward_fn):
        self.op = op
        self.out_tid = out_tid
        self.input_tids = input_tids
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records primitive operations for one forward pass.

    Single-writer: one thread builds the tape and runs :func:`backward` on
    it. Use as a context manager::

        with Tape() as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._output_tids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise UsageError("tapes exited out of order")

    def _record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self._records.append(
            _Record(op, out.tid, tuple(t.tid for t in inputs), backward_fn)
        )
        self._output_tids.add(out.tid)

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Gradients:
    """Gradient lookup produced by :func:`backward`.

    Indexing with a tensor returns its accumulated gradient; tensors that do
    not lie on any path to the loss get an exact zero array.
    """

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        grad = self._table.get(t.tid)
        if grad is None:
            return np.zeros_like(t.data)
        return grad

    def __contains__(self, t: Tensor) -> bool:
        return t.tid in self._table


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Accumulate gradients of a scalar loss over everything on the tape.

    The records are replayed in reverse execution order, which is a reverse
    topological order of the computation graph.
    """
    if len(tape) == 0:
        raise UsageError("backward called on an empty tape (no forward recorded)")
    if loss.shape != ():
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tid not in tape._output_tids:
        raise UsageError("loss was not computed under this tape")

    table: dict[int, np.ndarray] = {loss.tid: np.ones((), dtype=loss.dtype)}
    for rec in reversed(tape._records):
        grad_out = table.get(rec.out_tid)
        if grad_out is None:
            continue
        with np.errstate(all="ignore"):
            input_grads = rec.backward_fn(grad_out)
        for tid, grad in zip(rec.input_tids, input_grads):
            if grad is None:
                continue
            if not np.isfinite(grad).all():
                raise NumericalError(f"{rec.op} backward produced non-finite gradient")
            acc = table.get(tid)
            table[tid] = grad if acc is None else acc + grad
    return Gradients(table)


# ---------------------------------------------------------------------------
# Helpers


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d.
    if arr.ndim == 0:
        return arr if arr.flags["C_CONTIGUOUS"] else arr.copy()
    return np.ascontiguousarray(arr)


def _finish(op: str, arr: np.ndarray) -> np.ndarray:
    arr = _contiguous(np.asarray(arr))
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _make(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finish(op, arr)
    out.tid = next(_ids)
    tape = _active_tape()
    if tape is not None:
        tape._record(op, out, inputs, backward_fn)
    return out


def _coerce_pair(a, b, dtype_hint=None):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    dtype = a.dtype if isinstance(a, Tensor) else b.dtype
    if dtype_hint is not None:
        dtype = dtype_hint
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=dtype)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=dtype)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting NumPy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    axes = tuple(int(a) for a in axes)
    norm = tuple(a + ndim if a < 0 else a for a in axes)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    for a in norm:
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
    return tuple(sorted(norm))


def _ordered_sum(arr: np.ndarray, axes: tuple[int, ...], keepdims: bool = False) -> np.ndarray:
    """Sum over `axes`, accumulating values in ascending order.

    The canonical order makes the result independent of how entries were
    arranged along the reduced axes.
    """
    if not axes:
        return arr.copy()
    keep = tuple(i for i in range(arr.ndim) if i not in axes)
    moved = np.transpose(arr, keep + axes)
    flat = moved.reshape(tuple(arr.shape[i] for i in keep) + (-1,))
    out = np.sort(flat, axis=-1).sum(axis=-1)
    if keepdims:
        out = out.reshape(tuple(1 if i in axes else arr.shape[i] for i in range(arr.ndim)))
    return out


# ---------------------------------------------------------------------------
# Primitives


def add(a, b, dtype_hint=None) -> Tensor:
    a, b = _coerce_pair(a, b, dtype_hint)
    with np.errstate(all="ignore"):
        out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), back)


def sub(a, b, dtype_hint=None) -> Tensor:
    a, b = _coerce_pair(a, b, dtype_hint)
    with np.errstate(all="ignore"):
        out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), back)


def mul(a, b, dtype_hint=None) -> Tensor:
    a, b = _coerce_pair(a, b, dtype_hint)
    with np.errstate(all="ignore"):
        out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), back)


def div(a, b, dtype_hint=None) -> Tensor:
    a, b = _coerce_pair(a, b, dtype_hint)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return _make("neg", -a.data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product contracting the inner extents.

    1-D operands follow NumPy's promotion: a 1-D left operand is a row
    vector, a 1-D right operand is a column vector, and the promoted axis is
    dropped from the result.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul operands must be Tensors")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape} "
            f"(contracting {a2.shape[-1]} against {b2.shape[-2]})"
        )
    try:
        with np.errstate(all="ignore"):
            out = np.matmul(a2, b2)
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes incompatible: {a.shape} x {b.shape}") from exc
    full_shape = out.shape
    squeeze = []
    if a.ndim == 1:
        squeeze.append(-2)
    if b.ndim == 1:
        squeeze.append(-1)
    if squeeze:
        out = np.squeeze(out, axis=tuple(squeeze))

    def back(g):
        g2 = g.reshape(full_shape)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape)
        gb = _unbroadcast(gb, b2.shape)
        if a.ndim == 1:
            ga = ga[0]
        if b.ndim == 1:
            gb = gb[:, 0]
        return ga, gb

    return _make("matmul", out, (a, b), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        return (g * mask,)

    return _make("relu", np.maximum(a.data, 0), (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        return (g * 2.0 * a.data,)

    with np.errstate(all="ignore"):
        out_sq = a.data * a.data
    return _make("square", out_sq, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)

    def back(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Normalize to positive values summing to 1 along `axis`.

    Computed with max-subtraction; the normalizer accumulates in canonical
    order so permutations along `axis` permute the output exactly.
    """
    (axis,) = _normalize_axes((axis,), a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    with np.errstate(all="ignore"):
        e = np.exp(shifted)
    denom = _ordered_sum(e, (axis,), keepdims=True)
    y = e / denom

    def back(g):
        inner = _ordered_sum(g * y, (axis,), keepdims=True)
        return (y * (g - inner),)

    return _make("softmax", y, (a,), back)


def mean_pool(a: Tensor, axes: Iterable[int] | None) -> Tensor:
    """Arithmetic mean over a set of axes; remaining axes keep their order."""
    axes = _normalize_axes(axes, a.ndim)
    if not axes:
        def back_id(g):
            return (g,)

        return _make("mean_pool", a.data.copy(), (a,), back_id)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = _ordered_sum(a.data, axes) / count
    keep_shape = tuple(1 if i in axes else a.shape[i] for i in range(a.ndim))
    in_shape = a.shape

    def back(g):
        return (np.broadcast_to(g.reshape(keep_shape), in_shape) / count,)

    return _make("mean_pool", out, (a,), back)


def sum_pool(a: Tensor, axes: Iterable[int] | None) -> Tensor:
    """Sum over a set of axes (canonical accumulation order)."""
    axes = _normalize_axes(axes, a.ndim)
    if not axes:
        def back_id(g):
            return (g,)

        return _make("sum_pool", a.data.copy(), (a,), back_id)
    out = _ordered_sum(a.data, axes)
    keep_shape = tuple(1 if i in axes else a.shape[i] for i in range(a.ndim))
    in_shape = a.shape

    def back(g):
        return (np.broadcast_to(g.reshape(keep_shape), in_shape).copy(),)

    return _make("sum_pool", out, (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape

    def back(g):
        return (g.reshape(in_shape),)

    return _make("reshape", a.data.reshape(shape), (a,), back)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    ax1, ax2 = (_normalize_axes((ax1,), a.ndim)[0], _normalize_axes((ax2,), a.ndim)[0])

    def back(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    dtype = tensors[0].dtype
    for t in tensors:
        if t.dtype != dtype:
            raise TypeError("concat requires matching dtypes")
    axis = _normalize_axes((axis,), tensors[0].ndim)[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def back(g):
        splits = np.split(g, np.cumsum(extents)[:-1], axis=axis)
        return tuple(splits)

    return _make("concat", out, tuple(tensors), back)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    parts = [reshape(t, (1,) + t.shape) for t in tensors]
    return concat(parts, axis=0)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along `axis` at the given integer indices (axis kept)."""
    axis = _normalize_axes((axis,), a.ndim)[0]
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather indices must be 1-D")
    if idx.size == 0:
        raise ShapeError("gather with empty indices")
    if (idx < 0).any() or (idx >= a.shape[axis]).any():
        raise ShapeError(f"gather index out of range for extent {a.shape[axis]}")
    in_shape = a.shape

    def back(g):
        ga = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(ga, tuple(idx if d == axis else slice(None) for d in range(len(in_shape))), g)
        return (ga,)

    return _make("gather", np.take(a.data, idx, axis=axis), (a,), back)


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one slice along `axis`; the axis is removed from the result."""
    axis = _normalize_axes((axis,), a.ndim)[0]
    index = int(index)
    if not 0 <= index < a.shape[axis]:
        raise ShapeError(f"index {index} out of range for extent {a.shape[axis]}")
    in_shape = a.shape
    sel = tuple(index if d == axis else slice(None) for d in range(a.ndim))

    def back(g):
        ga = np.zeros(in_shape, dtype=g.dtype)
        ga[sel] = g
        return (ga,)

    return _make("take", a.data[sel].copy(), (a,), back)
