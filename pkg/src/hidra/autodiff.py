"""Tape-based reverse-mode automatic differentiation over small dense float64 arrays.

Every primitive records a node on a :class:`Tape`. Vector-Jacobian products are
written in terms of the same primitives, so running :func:`backward` with
``create_graph=True`` records the gradient computation itself and a second
backward pass yields second-order terms.

>>> tape = Tape()
>>> x = tape.variable(3.0)
>>> (g,) = backward(x * x, [x])
>>> float(g.value)
6.0
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LineageError, NonFiniteError, ValidationError

__all__ = [
    "Tape", "Tensor", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "add_rowvec",
    "sum_rows", "tile_rows", "row_sums", "tile_cols", "total", "expand", "mean",
    "relu", "logsumexp_rows", "softmax_rows", "softmax_cross_entropy",
    "slice_rows", "pad_rows", "concat_rows", "reshape",
]

# vjp(upstream_grad, output, needs) -> one entry per input (None where not needed)
Vjp = Callable[["Tensor", "Tensor", Sequence[bool]], Sequence["Tensor | None"]]


class Node:
    __slots__ = ("id", "op", "inputs", "vjp", "value")

    def __init__(self, id: int, op: str, inputs: tuple, vjp: Vjp | None, value: np.ndarray):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.value = value

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op!r})"


class Tape:
    """Append-only record of primitive operations.

    ``mark()``/``truncate()`` discard everything recorded after a checkpoint,
    which is how per-task inner-loop graphs are dropped between meta-steps.
    """

    def __init__(self, checked: bool = False):
        self.nodes: list[Node] = []
        self.checked = checked
        self.recording = True
        self._marks: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value) -> Tensor:
        return self._leaf(value, "leaf")

    def constant(self, value) -> Tensor:
        return self._leaf(value, "const")

    def _leaf(self, value, op: str) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        if self.checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in {op}")
        node = Node(len(self.nodes), op, (), None, arr)
        self.nodes.append(node)
        return Tensor(self, node, arr)

    def mark(self) -> int:
        self._marks.append(len(self.nodes))
        return self._marks[-1]

    def truncate(self, mark: int | None = None) -> None:
        """Drop nodes recorded after ``mark`` (default: pop the latest mark)."""
        if mark is None:
            if not self._marks:
                raise ContractError("truncate() without an active mark")
            mark = self._marks.pop()
        else:
            if mark > len(self.nodes):
                raise ContractError(f"mark {mark} is beyond tape length {len(self.nodes)}")
            while self._marks and self._marks[-1] >= mark:
                self._marks.pop()
        del self.nodes[mark:]

    @contextmanager
    def no_record(self) -> Iterator[None]:
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    def owns(self, t: Tensor) -> bool:
        n = t.node
        return t.tape is self and (n is None or (n.id < len(self.nodes) and self.nodes[n.id] is n))


class Tensor:
    """A value living on a tape. ``node`` is None for detached (unrecorded) constants."""

    __slots__ = ("tape", "node", "value")

    def __init__(self, tape: Tape, node: Node | None, value: np.ndarray):
        self.tape = tape
        self.node = node
        self.value = value

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Tensor(id={self.node_id}, shape={self.shape})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return mean(self)


def _tape_of(inputs: Sequence[Tensor]) -> Tape:
    tape = inputs[0].tape
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"expected Tensor, got {type(t).__name__}")
        if not tape.owns(t):
            raise LineageError("operands live on different tapes or were truncated")
    return tape


def _emit(op: str, value: np.ndarray, inputs: tuple, vjp: Vjp) -> Tensor:
    tape = _tape_of(inputs)
    if tape.checked and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    if not tape.recording:
        return Tensor(tape, None, value)
    node = Node(len(tape.nodes), op, inputs, vjp, value)
    tape.nodes.append(node)
    return Tensor(tape, node, value)


def _const(tape: Tape, value: np.ndarray) -> Tensor:
    return tape.constant(value) if tape.recording else Tensor(tape, None, value)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _matrix(op: str, a: Tensor) -> None:
    if a.value.ndim != 2:
        raise DimensionError(f"{op}: expected a matrix, got shape {a.shape}")


# ---- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g, out, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g, out, needs: (g, neg(g) if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def vjp(g, out, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return _emit("mul", a.value * b.value, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.value, (a,), lambda g, out, needs: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g, out, needs: (scale(g, c),))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0; the mask is a constant so relu'' = 0
    mask = (a.value > 0).astype(np.float64)

    def vjp(g, out, needs):
        return (mul(g, _const(g.tape, mask)),)

    return _emit("relu", np.maximum(a.value, 0.0), (a,), vjp)


# ---- linear algebra & shape --------------------------------------------------

def _symmetric_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # every output entry is reduced by the same code path over a sorted contraction,
    # so it depends neither on its position nor on the contraction order
    prod = a[:, None, :] * np.ascontiguousarray(b.T)[None, :, :]
    prod.sort(axis=-1)
    return prod.sum(axis=-1)


def matmul(a: Tensor, b: Tensor, symmetric: bool = False) -> Tensor:
    """Matrix product.

    ``symmetric=True`` trades speed for exact invariance: permuting the rows of ``b``
    (or columns of ``a``) permutes or leaves unchanged the result bit for bit. Used for
    products that touch the class axis of an output head.
    """
    _matrix("matmul", a)
    _matrix("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

    def vjp(g, out, needs):
        return (matmul(g, transpose(b), symmetric) if needs[0] else None,
                matmul(transpose(a), g, symmetric) if needs[1] else None)

    value = _symmetric_matmul(a.value, b.value) if symmetric else a.value @ b.value
    return _emit("matmul", value, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    _matrix("transpose", a)
    return _emit("transpose", np.ascontiguousarray(a.value.T), (a,),
                 lambda g, out, needs: (transpose(g),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _emit("reshape", a.value.reshape(shape), (a,),
                 lambda g, out, needs: (reshape(g, old),))


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to every row of matrix ``a``."""
    _matrix("add_rowvec", a)
    if b.value.ndim != 1 or b.shape[0] != a.shape[1]:
        raise DimensionError(f"add_rowvec: bias shape {b.shape} does not fit matrix {a.shape}")
    return _emit("add_rowvec", a.value + b.value, (a, b),
                 lambda g, out, needs: (g, sum_rows(g) if needs[1] else None))


def sum_rows(a: Tensor) -> Tensor:
    """Column sums: (m, n) -> (n,)."""
    _matrix("sum_rows", a)
    m = a.shape[0]
    return _emit("sum_rows", a.value.sum(axis=0), (a,), lambda g, out, needs: (tile_rows(g, m),))


def tile_rows(v: Tensor, m: int) -> Tensor:
    """(n,) -> (m, n) with every row equal to ``v``."""
    if v.value.ndim != 1:
        raise DimensionError(f"tile_rows: expected a vector, got {v.shape}")
    return _emit("tile_rows", np.tile(v.value, (m, 1)), (v,), lambda g, out, needs: (sum_rows(g),))


def row_sums(a: Tensor) -> Tensor:
    """Row sums: (m, n) -> (m,)."""
    _matrix("row_sums", a)
    n = a.shape[1]
    return _emit("row_sums", _row_sum(a.value), (a,), lambda g, out, needs: (tile_cols(g, n),))


def tile_cols(v: Tensor, n: int) -> Tensor:
    """(m,) -> (m, n) with every column equal to ``v``."""
    if v.value.ndim != 1:
        raise DimensionError(f"tile_cols: expected a vector, got {v.shape}")
    return _emit("tile_cols", np.repeat(v.value[:, None], n, axis=1), (v,),
                 lambda g, out, needs: (row_sums(g),))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.array(np.sort(a.value, axis=None).sum()), (a,), lambda g, out, needs: (expand(g, shape),))


def expand(s: Tensor, shape: tuple[int, ...]) -> Tensor:
    if s.value.ndim != 0:
        raise DimensionError(f"expand: expected a scalar, got {s.shape}")
    return _emit("expand", np.full(shape, float(s.value)), (s,), lambda g, out, needs: (total(g),))


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.value.size)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {n} rows")
    return _emit("slice_rows", a.value[start:stop].copy(), (a,),
                 lambda g, out, needs: (pad_rows(g, start, n),))


def pad_rows(a: Tensor, start: int, total_rows: int) -> Tensor:
    """Embed ``a`` at row offset ``start`` in a zero array of ``total_rows`` rows."""
    k = a.shape[0]
    if start < 0 or start + k > total_rows:
        raise DimensionError(f"pad_rows: {k} rows at {start} do not fit in {total_rows}")
    out = np.zeros((total_rows,) + a.shape[1:])
    out[start:start + k] = a.value
    return _emit("pad_rows", out, (a,), lambda g, out, needs: (slice_rows(g, start, start + k),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat_rows: nothing to concatenate")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.value.ndim == 0 or p.shape[1:] != tail:
            raise DimensionError(f"concat_rows: incompatible shapes {[q.shape for q in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g, out, needs):
        return tuple(slice_rows(g, int(offsets[i]), int(offsets[i + 1])) if needs[i] else None
                     for i in range(len(parts)))

    return _emit("concat_rows", np.concatenate([p.value for p in parts], axis=0), parts, vjp)


# ---- softmax family ----------------------------------------------------------

def _row_sum(a: np.ndarray) -> np.ndarray:
    # sorted so the result does not depend on column order
    return np.sort(a, axis=1).sum(axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / _row_sum(e)[:, None]


def softmax_rows(z: Tensor) -> Tensor:
    _matrix("softmax_rows", z)
    n = z.shape[1]

    def vjp(g, out, needs):
        # J^T g = s * (g - <g, s>)
        return (mul(out, sub(g, tile_cols(row_sums(mul(g, out)), n))),)

    return _emit("softmax_rows", _softmax(z.value), (z,), vjp)


def logsumexp_rows(z: Tensor) -> Tensor:
    _matrix("logsumexp_rows", z)
    n = z.shape[1]
    zmax = z.value.max(axis=1)
    value = zmax + np.log(_row_sum(np.exp(z.value - zmax[:, None])))
    return _emit("logsumexp_rows", value, (z,),
                 lambda g, out, needs: (mul(tile_cols(g, n), softmax_rows(z)),))


def softmax_cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``.

    Each row is evaluated as ``(max - z_label) + log(sum(exp(z - max)))`` and rows are
    averaged around the first row, so equal logits give exactly ``log(C)``.
    """
    _matrix("softmax_cross_entropy", logits)
    y = np.asarray(onehot.value if isinstance(onehot, Tensor) else onehot, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs targets {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValidationError("softmax_cross_entropy: targets must be one-hot rows")
    z = logits.value
    m = z.shape[0]
    zmax = z.max(axis=1)
    rows = (zmax - z[y == 1]) + np.log(_row_sum(np.exp(z - zmax[:, None])))
    value = np.array(rows[0] + (rows - rows[0]).sum() / m)

    def vjp(g, out, needs):
        diff = sub(softmax_rows(logits), _const(g.tape, y))
        return (scale(mul(expand(g, z.shape), diff), 1.0 / m),)

    return _emit("softmax_cross_entropy", value, (logits,), vjp)


# ---- differentiation ---------------------------------------------------------

def backward(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are recorded tape nodes and can be
    differentiated again. Otherwise they are detached constants. Tensors that do
    not influence ``loss`` get a zero gradient.
    """
    if loss.value.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss.tape
    if loss.node is None or not tape.owns(loss):
        raise LineageError("backward: loss is not recorded on its tape")
    for w in wrt:
        if w.tape is not tape or w.node is None or not tape.owns(w):
            raise LineageError(f"backward: {w!r} is not recorded on the loss tape")
    if not wrt:
        return []

    nodes = tape.nodes
    top = loss.node.id
    wrt_ids = {w.node.id for w in wrt}
    lo = min(wrt_ids)
    relevant = bytearray(top + 1)
    for i in range(lo, top + 1):
        if i in wrt_ids:
            relevant[i] = 1
            continue
        for inp in nodes[i].inputs:
            n = inp.node
            if n is not None and n.id >= lo and relevant[n.id]:
                relevant[i] = 1
                break

    grads: dict[int, Tensor] = {}
    prev = tape.recording
    tape.recording = create_graph
    try:
        if relevant[top]:
            grads[top] = _const(tape, np.ones(()))
        for i in range(top, lo - 1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            if i not in wrt_ids:
                del grads[i]
            needs = tuple(inp.node is not None and inp.node.id >= lo and bool(relevant[inp.node.id])
                          for inp in node.inputs)
            if not any(needs):
                continue
            out = Tensor(tape, node, node.value)
            for inp, need, gi in zip(node.inputs, needs, node.vjp(g, out, needs)):
                if not need or gi is None:
                    continue
                j = inp.node.id
                grads[j] = gi if j not in grads else add(grads[j], gi)
    finally:
        tape.recording = prev

    result = []
    for w in wrt:
        g = grads.get(w.node.id)
        if g is None:
            g = _const(tape, np.zeros(w.shape)) if create_graph else Tensor(tape, None, np.zeros(w.shape))
        elif not create_graph:
            g = Tensor(tape, None, g.value)
        result.append(g)
    return result

