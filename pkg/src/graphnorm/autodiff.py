"""Dense 2-D tensors with a reverse-mode tape.

Every array is float64 and two-dimensional.  Operations executed while a
:class:`Tape` is active (``with Tape() as tape: ...``) are recorded, and
``tape.backward(loss)`` accumulates gradients into the ``grad`` slot of every
leaf tensor created with ``requires_grad=True``.

Reductions that feed normalization statistics (``row_sum`` and the segment
reductions) add their terms strictly left to right, so their results are
reproducible bit for bit by a plain Python loop over the same elements.
"""

from __future__ import annotations

import itertools
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "Segments",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "current_tape",
    "no_grad",
    "constant",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "relu",
    "leaky_relu",
    "sigmoid",
    "sqrt",
    "square",
    "exp",
    "log",
    "absolute",
    "softplus",
    "clip_min",
    "concat_cols",
    "row_sum",
    "row_mean",
    "row_var",
    "total_sum",
    "total_mean",
    "segment_sum",
    "segment_mean",
    "gather_rows",
    "scatter_add_rows",
    "forward_op",
    "finite_diff_gradient",
    "GradEstimate",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_ids = itertools.count()


class Tensor:
    """A float64 matrix with an optional gradient buffer.

    ``values`` is read-only once the tensor exists; optimizers swap in a new
    array instead of writing into the old one.
    """

    __slots__ = ("_values", "grad", "requires_grad", "is_leaf", "id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        self._values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.id = next(_ids)
        self.name = name

    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new) -> None:
        arr = np.array(new, dtype=np.float64)
        if arr.shape != self._values.shape:
            raise ShapeError(f"cannot replace {self._values.shape} values with {arr.shape}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    @property
    def rows(self) -> int:
        return self._values.shape[0]

    @property
    def cols(self) -> int:
        return self._values.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self._values[0, 0])

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # fresh op outputs: skip the defensive copy
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t._values = arr
        t.grad = None
        t.requires_grad = False
        t.is_leaf = True
        t.id = next(_ids)
        t.name = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self._values.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=False, name=name)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record(NamedTuple):
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _active[-1] if _active else None


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-use: after :meth:`backward` it must be :meth:`reset`
    before it can be replayed again, unless ``retain=True`` was passed.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _active.pop()
        assert popped is self

    def _append(self, record: _Record) -> None:
        if self.consumed:
            raise TapeError("tape already consumed; call reset() before recording again")
        self.records.append(record)

    def reset(self) -> None:
        self.records = []
        self.consumed = False

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if not self.recording:
            raise TapeError("backward() on a tape in inference mode")
        if self.consumed:
            raise TapeError("tape already consumed; call reset() first")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
        if loss.is_leaf and loss.requires_grad:
            _accumulate_leaf(loss, grads.pop(loss.id))
        for rec in reversed(self.records):
            g = grads.pop(rec.output.id, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                elif inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        if not retain:
            self.consumed = True


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


class no_grad:
    """Suspend recording inside the block (evaluation passes)."""

    def __enter__(self):
        _active.append(Tape(recording=False))
        return self

    def __exit__(self, *exc):
        _active.pop()


def _emit(kind: str, values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    tape = current_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.ascontiguousarray(values))
    out.is_leaf = False
    if needs and tape is not None and tape.recording:
        out.requires_grad = True
        tape._append(_Record(kind, inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], kind: str) -> tuple[int, int]:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{kind}: shapes {a} and {b} do not broadcast")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.values, b.values
    return _emit("mul_elementwise", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "div")
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def backward(g):
        ga = _unbroadcast(g / bv, av.shape)
        gb = _unbroadcast(-g * out / bv, bv.shape)
        return ga, gb

    return _emit("div_elementwise", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit("scale", -a.values, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.values > 0
    return _emit("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.values > 0
    factor = np.where(mask, 1.0, slope)
    return _emit("leaky_relu", a.values * factor, (a,), lambda g: (g * factor,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.values)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.values)

    def backward(g):
        # d/dx sqrt(x) is unbounded at 0; treat it like a kink and pass 0
        safe = np.where(r > 0, r, 1.0)
        return (np.where(r > 0, g * 0.5 / safe, 0.0),)

    return _emit("sqrt", r, (a,), backward)


def square(a: Tensor) -> Tensor:
    av = a.values
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.values)
    return _emit("exp", e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.values)
    return _emit("abs", np.abs(a.values), (a,), lambda g: (g * sgn,))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = a.values
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _stable_sigmoid(x)
    return _emit("softplus", out, (a,), lambda g: (g * s,))


def clip_min(a: Tensor, floor: float = 0.0) -> Tensor:
    mask = a.values > floor
    return _emit("clip_min", np.where(mask, a.values, floor), (a,), lambda g: (g * mask,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_cols of nothing")
    n = parts[0].rows
    if any(p.rows != n for p in parts):
        raise ShapeError("concat_cols: row counts differ " + str([p.rows for p in parts]))
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.values for p in parts], axis=1), parts, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _seq_row_sum(x: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], 1))
    for j in range(x.shape[1]):
        out[:, 0] += x[:, j]
    return out


def row_sum(a: Tensor) -> Tensor:
    """Per-row sum over columns, n x d -> n x 1, added left to right."""
    d = a.cols
    return _emit("row_sum", _seq_row_sum(a.values), (a,), lambda g: (np.repeat(g, d, axis=1),))


def row_mean(a: Tensor) -> Tensor:
    d = a.cols
    return _emit("row_mean", _seq_row_sum(a.values) / d, (a,),
                 lambda g: (np.repeat(g / d, d, axis=1),))


def row_var(a: Tensor) -> Tensor:
    """Biased per-row variance over columns."""
    d = a.cols
    mu = _seq_row_sum(a.values) / d
    diff = a.values - mu
    var = _seq_row_sum(diff * diff) / d
    return _emit("row_var", var, (a,), lambda g: (g * (2.0 / d) * diff,))


def total_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def total_mean(a: Tensor) -> Tensor:
    size = a.rows * a.cols
    return scale(total_sum(a), 1.0 / size)


class Segments:
    """Sorted assignment of rows to ``num_segments`` contiguous groups.

    Backed by a 0/1 CSR selector so segment sums run in C but still add
    each segment's rows in row order.
    """

    def __init__(self, ids, num_segments: int | None = None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if num_segments is None:
            num_segments = int(ids.max()) + 1 if ids.size else 0
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise ValueError(f"unknown segment id outside [0, {num_segments})")
        if ids.size > 1 and np.any(np.diff(ids) < 0):
            raise ValueError("segment ids must be sorted")
        self.ids = ids
        self.ids.flags.writeable = False
        self.num_segments = int(num_segments)
        self.counts = np.bincount(ids, minlength=self.num_segments).astype(np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self._selector = None

    def __len__(self) -> int:
        return self.ids.size

    @property
    def selector(self) -> sp.csr_matrix:
        if self._selector is None:
            m = self.ids.size
            self._selector = sp.csr_matrix(
                (np.ones(m), np.arange(m), self.offsets.copy()),
                shape=(self.num_segments, m),
            )
        return self._selector

    def __repr__(self) -> str:
        return f"Segments(rows={self.ids.size}, segments={self.num_segments})"


def _check_segments(a: Tensor, segments: Segments, kind: str) -> None:
    if a.rows != len(segments):
        raise ShapeError(f"{kind}: {a.rows} rows but segment map covers {len(segments)}")


def segment_sum(a: Tensor, segments: Segments) -> Tensor:
    _check_segments(a, segments, "segment_sum")
    ids = segments.ids
    out = np.asarray(segments.selector @ a.values)
    return _emit("segment_sum", out, (a,), lambda g: (g[ids],))


def segment_mean(a: Tensor, segments: Segments) -> Tensor:
    _check_segments(a, segments, "segment_mean")
    ids = segments.ids
    counts = np.maximum(segments.counts, 1).astype(np.float64)[:, None]
    out = np.asarray(segments.selector @ a.values) / counts
    return _emit("segment_mean", out, (a,), lambda g: ((g / counts)[ids],))


def _scatter_matrix(index: np.ndarray, num_rows: int) -> sp.csr_matrix:
    m = index.size
    return sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(num_rows, m))


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    n = a.rows
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")

    def backward(g):
        return (np.asarray(_scatter_matrix(index, n) @ g),)

    return _emit("gather_rows", a.values[index], (a,), backward)


def scatter_add_rows(a: Tensor, index, num_rows: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size != a.rows:
        raise ShapeError(f"scatter_add_rows: {a.rows} rows, {index.size} indices")
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise ShapeError("scatter_add_rows: index out of range")
    out = np.asarray(_scatter_matrix(index, num_rows) @ a.values)
    return _emit("scatter_add_rows", out, (a,), lambda g: (g[index],))


_KINDS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "div_elementwise": div,
    "scale": scale,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
    "square": square,
    "exp": exp,
    "log": log,
    "abs": absolute,
    "softplus": softplus,
    "concat_cols": lambda *parts: concat_cols(parts),
    "segment_sum": segment_sum,
    "segment_mean": segment_mean,
    "row_sum": row_sum,
    "row_mean": row_mean,
    "row_var": row_var,
    "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
    "clip_min": clip_min,
    "sum": total_sum,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("leaky_relu", x, slope=0.2)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


class GradEstimate(NamedTuple):
    grad: Tensor
    skipped: np.ndarray


def finite_diff_gradient(
    fn: Callable[[Tensor], Tensor | float],
    x: Tensor,
    h: float = 1e-6,
    kinks: Sequence[float] = (),
) -> GradEstimate:
    """Central-difference gradient of a scalar function.

    Elements lying within ``h`` of any value in ``kinks`` are not perturbed;
    their estimate is 0 and they are flagged in ``skipped``.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    base = x.values
    grad = np.zeros_like(base)
    skipped = np.zeros(base.shape, dtype=bool)
    for k in kinks:
        skipped |= np.abs(base - k) <= h

    def evaluate(v: np.ndarray) -> float:
        with no_grad():
            out = fn(Tensor(v))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NonFiniteError("function under finite differences returned a non-finite value")
        return val

    for idx in np.ndindex(base.shape):
        if skipped[idx]:
            continue
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
    return GradEstimate(Tensor(grad), skipped)
