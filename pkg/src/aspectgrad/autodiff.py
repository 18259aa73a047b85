"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation is recorded as a :class:`Node` on a :class:`Tape`.  The
backward pass is itself expressed in the same recorded primitives, so a
gradient obtained with ``create_graph=True`` is an ordinary node and can be
differentiated again.  That second-order capability is what the training
objective needs: it contains a loss term built from input gradients.

Conventions:

* Values are ``numpy`` float64 arrays, row-major, treated as immutable once
  recorded.  Use :func:`tensor` to build one; it rejects NaN/Inf.
* A tape is single-writer.  Independent tapes may be used from different
  threads concurrently; nodes never reference other tapes.
* Scalars are 0-d arrays.
"""

from __future__ import annotations

import heapq
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "Node",
    "Tape",
    "grad",
    "check_gradient",
    "AutodiffError",
    "UnknownOpError",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "dot",
    "gather",
    "scatter",
    "reduce_sum",
    "reduce_mean",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "absolute",
    "scale",
    "concat",
    "narrow",
    "pad",
    "reshape",
    "transpose",
]

# A tensor is a float64 ndarray; the alias documents intent at API boundaries.
Tensor = np.ndarray


class AutodiffError(Exception):
    """Base class for engine errors."""


class UnknownOpError(AutodiffError):
    """An operation tag that is not registered."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the operation."""


def tensor(data) -> Tensor:
    """Build a float64 tensor, rejecting non-finite values."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite (got NaN or Inf)")
    return arr


class Node:
    """One recorded operation: identity, op tag, input nodes and cached value."""

    __slots__ = ("tape", "id", "op", "inputs", "value", "requires_grad", "generation", "meta")

    def __init__(self, tape, id, op, inputs, value, requires_grad, generation, meta):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.generation = generation
        self.meta = meta

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.inputs)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # Operator sugar; python scalars become constants on the same tape.
    def __add__(self, other):
        return add(self, _coerce(self.tape, other))

    def __radd__(self, other):
        return add(_coerce(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _coerce(self.tape, other))

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _coerce(self.tape, other))

    def __rmul__(self, other):
        return mul(_coerce(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _coerce(self.tape, other))

    def __rtruediv__(self, other):
        return div(_coerce(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)


def _coerce(tape: "Tape", x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
        return x
    return tape.constant(x)


class Tape:
    """Append-only record of a computation graph.

    ``generation`` counts backward passes: nodes created while a backward
    pass is running carry a generation greater than the forward pass they
    differentiate.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, value, requires_grad, meta) -> Node:
        node = Node(self, len(self.nodes), op, inputs, value, requires_grad, self.generation, meta)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """A node that does not require gradients."""
        return self._append("const", (), tensor(value), False, None)

    def variable(self, value) -> Node:
        """A leaf node that gradients can be requested for."""
        return self._append("leaf", (), tensor(value), True, None)

    def record(self, op: str, inputs: Sequence[Node], **meta) -> Node:
        """Record one operation, computing and caching its value.

        Raises :class:`UnknownOpError` for an unregistered tag and
        :class:`ShapeError` when operand shapes do not fit the op.
        """
        opdef = _OPS.get(op)
        if opdef is None:
            raise UnknownOpError(f"unknown op tag: {op!r}")
        inputs = tuple(inputs)
        for n in inputs:
            if n.tape is not self:
                raise ValueError("input node belongs to a different tape")
        value = opdef.forward([n.value for n in inputs], meta)
        requires_grad = any(n.requires_grad for n in inputs)
        return self._append(op, inputs, value, requires_grad, meta or None)

    def dump(self) -> str:
        """Line-oriented debug trace: id, op, input ids, shape, generation."""
        lines = []
        for n in self.nodes:
            ids = ",".join(str(i) for i in n.input_ids)
            lines.append(f"{n.id}\t{n.op}\t[{ids}]\t{n.shape}\tgen={n.generation}")
        return "\n".join(lines)

    def replay(self) -> None:
        """Recompute every non-leaf value and assert bit-identical results."""
        for n in self.nodes:
            if n.op in ("const", "leaf"):
                continue
            redone = _OPS[n.op].forward([i.value for i in n.inputs], n.meta or {})
            if not np.array_equal(redone, n.value):
                raise AutodiffError(f"replay mismatch at node {n.id} ({n.op})")


# ---------------------------------------------------------------------------
# Operation registry
# ---------------------------------------------------------------------------


class _Op:
    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name: str, forward: Callable, vjp: Callable | None):
        self.name = name
        self.forward = forward
        self.vjp = vjp


_OPS: dict[str, _Op] = {}


def _register(name, forward, vjp):
    _OPS[name] = _Op(name, forward, vjp)


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


def _elementwise_shapes(a, b, op, allow_row_broadcast=False):
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    if allow_row_broadcast:
        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            return
        if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: Node, shape: tuple[int, ...]) -> Node:
    """Collapse a broadcast gradient back to the shape of its operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return reduce_sum(g)
    if g.value.ndim == 2 and shape == (g.shape[1],):
        return reduce_sum(g, axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# -- arithmetic -------------------------------------------------------------


def _fwd_add(vals, meta):
    a, b = vals
    _elementwise_shapes(a, b, "add", allow_row_broadcast=True)
    return a + b


def _vjp_add(node, g):
    a, b = node.inputs
    return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))


def _fwd_sub(vals, meta):
    a, b = vals
    _elementwise_shapes(a, b, "sub")
    return a - b


def _vjp_sub(node, g):
    a, b = node.inputs
    return (_reduce_to(g, a.shape), scale(_reduce_to(g, b.shape), -1.0))


def _fwd_mul(vals, meta):
    a, b = vals
    _elementwise_shapes(a, b, "mul")
    return a * b


def _vjp_mul(node, g):
    a, b = node.inputs
    return (_reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape))


def _fwd_div(vals, meta):
    a, b = vals
    _elementwise_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        return a / b


def _vjp_div(node, g):
    a, b = node.inputs
    ga = _reduce_to(div(g, b), a.shape)
    gb = _reduce_to(scale(mul(g, div(a, mul(b, b))), -1.0), b.shape)
    return (ga, gb)


def _fwd_scale(vals, meta):
    factor = meta["factor"]
    if not math.isfinite(factor):
        raise ValueError("scale factor must be finite")
    return vals[0] * factor


def _vjp_scale(node, g):
    return (scale(g, node.meta["factor"]),)


# -- linear algebra ----------------------------------------------------------


def _fwd_matmul(vals, meta):
    a, b = vals
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0])
        or (a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0])
    )
    _require(ok, f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def _vjp_matmul(node, g):
    a, b = node.inputs
    if a.value.ndim == 2 and b.value.ndim == 2:
        return (matmul(g, transpose(b)), matmul(transpose(a), g))
    if a.value.ndim == 2 and b.value.ndim == 1:
        m, n = a.shape
        ga = matmul(reshape(g, (m, 1)), reshape(b, (1, n)))
        gb = matmul(transpose(a), g)
        return (ga, gb)
    # (n,) @ (n, p)
    n, p = b.shape
    ga = matmul(b, g)
    gb = matmul(reshape(a, (n, 1)), reshape(g, (1, p)))
    return (ga, gb)


def _fwd_dot(vals, meta):
    a, b = vals
    _require(a.ndim == 1 and b.ndim == 1 and a.shape == b.shape,
             f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    return np.asarray(np.dot(a, b))


def _vjp_dot(node, g):
    a, b = node.inputs
    return (mul(g, b), mul(g, a))


def _fwd_transpose(vals, meta):
    (a,) = vals
    _require(a.ndim == 2, f"transpose: expected a matrix, got shape {a.shape}")
    return a.T


def _vjp_transpose(node, g):
    return (transpose(g),)


# -- indexing / structure ----------------------------------------------------


def _fwd_gather(vals, meta):
    (table,) = vals
    row = meta["row"]
    _require(table.ndim == 2, f"gather: expected a matrix, got shape {table.shape}")
    if not 0 <= row < table.shape[0]:
        raise ShapeError(f"gather: row {row} out of range for {table.shape[0]} rows")
    return table[row]


def _vjp_gather(node, g):
    return (scatter(g, node.meta["row"], node.inputs[0].shape[0]),)


def _fwd_scatter(vals, meta):
    (vec,) = vals
    row, rows = meta["row"], meta["rows"]
    _require(vec.ndim == 1, f"scatter: expected a vector, got shape {vec.shape}")
    if not 0 <= row < rows:
        raise ShapeError(f"scatter: row {row} out of range for {rows} rows")
    out = np.zeros((rows, vec.shape[0]))
    out[row] = vec
    return out


def _vjp_scatter(node, g):
    return (gather(g, node.meta["row"]),)


def _fwd_concat(vals, meta):
    _require(len(vals) >= 1, "concat: needs at least one input")
    for v in vals:
        _require(v.ndim <= 1, f"concat: inputs must be scalars or vectors, got shape {v.shape}")
    return np.concatenate([np.atleast_1d(v) for v in vals])


def _vjp_concat(node, g):
    grads = []
    offset = 0
    for inp in node.inputs:
        size = int(np.prod(inp.shape, dtype=int)) if inp.shape else 1
        seg = narrow(g, offset, offset + size)
        if inp.shape != (size,):
            seg = reshape(seg, inp.shape)
        grads.append(seg)
        offset += size
    return tuple(grads)


def _fwd_slice(vals, meta):
    (a,) = vals
    start, stop = meta["start"], meta["stop"]
    _require(a.ndim == 1, f"slice: expected a vector, got shape {a.shape}")
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for length {a.shape[0]}")
    return a[start:stop]


def _vjp_slice(node, g):
    return (pad(g, node.meta["start"], node.inputs[0].shape[0]),)


def _fwd_pad(vals, meta):
    (a,) = vals
    start, length = meta["start"], meta["length"]
    _require(a.ndim == 1, f"pad: expected a vector, got shape {a.shape}")
    if start < 0 or start + a.shape[0] > length:
        raise ShapeError(f"pad: segment [{start}, {start + a.shape[0]}) exceeds length {length}")
    out = np.zeros(length)
    out[start:start + a.shape[0]] = a
    return out


def _vjp_pad(node, g):
    start = node.meta["start"]
    return (narrow(g, start, start + node.inputs[0].shape[0]),)


def _fwd_reshape(vals, meta):
    (a,) = vals
    shape = tuple(meta["shape"])
    if int(np.prod(shape, dtype=int)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return np.reshape(a, shape)


def _vjp_reshape(node, g):
    return (reshape(g, node.inputs[0].shape),)


# -- reductions --------------------------------------------------------------


def _fwd_sum(vals, meta):
    (a,) = vals
    axis = meta.get("axis")
    if axis is None:
        return np.asarray(a.sum())
    _require(axis == 0 and a.ndim == 2, f"sum: axis {axis} unsupported for shape {a.shape}")
    return a.sum(axis=0)


def _vjp_sum(node, g):
    x = node.inputs[0]
    axis = (node.meta or {}).get("axis")
    tape = node.tape
    if axis is None:
        return (mul(tape.constant(np.ones(x.shape)), g),)
    n, m = x.shape
    return (matmul(tape.constant(np.ones((n, 1))), reshape(g, (1, m))),)


def _fwd_mean(vals, meta):
    (a,) = vals
    _require(a.size >= 1, "mean: empty tensor")
    return np.asarray(a.mean())


def _vjp_mean(node, g):
    x = node.inputs[0]
    ones = node.tape.constant(np.ones(x.shape))
    return (mul(ones, scale(g, 1.0 / x.value.size)),)


# -- elementwise nonlinearities ----------------------------------------------


def _fwd_tanh(vals, meta):
    return np.tanh(vals[0])


def _vjp_tanh(node, g):
    y = node
    one = node.tape.constant(1.0)
    return (mul(g, sub(one, mul(y, y))),)


def _fwd_relu(vals, meta):
    return np.maximum(vals[0], 0.0)


def _vjp_relu(node, g):
    # Derivative at exactly 0 is taken as 0.
    mask = node.tape.constant((node.inputs[0].value > 0).astype(np.float64))
    return (mul(g, mask),)


def _fwd_exp(vals, meta):
    with np.errstate(over="ignore"):
        return np.exp(vals[0])


def _vjp_exp(node, g):
    return (mul(g, node),)


def _fwd_log(vals, meta):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(vals[0])


def _vjp_log(node, g):
    return (div(g, node.inputs[0]),)


def _fwd_abs(vals, meta):
    return np.abs(vals[0])


def _vjp_abs(node, g):
    # sign(0) = 0: the documented subgradient at the kink.
    sign = node.tape.constant(np.sign(node.inputs[0].value))
    return (mul(g, sign),)


def _fwd_softmax(vals, meta):
    (z,) = vals
    _require(z.ndim == 1, f"softmax: expected a vector, got shape {z.shape}")
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def _vjp_softmax(node, g):
    y = node
    return (mul(y, sub(g, dot(g, y))),)


for _name, _fwd, _vjp in [
    ("add", _fwd_add, _vjp_add),
    ("sub", _fwd_sub, _vjp_sub),
    ("mul", _fwd_mul, _vjp_mul),
    ("div", _fwd_div, _vjp_div),
    ("scale", _fwd_scale, _vjp_scale),
    ("matmul", _fwd_matmul, _vjp_matmul),
    ("dot", _fwd_dot, _vjp_dot),
    ("transpose", _fwd_transpose, _vjp_transpose),
    ("gather", _fwd_gather, _vjp_gather),
    ("scatter", _fwd_scatter, _vjp_scatter),
    ("concat", _fwd_concat, _vjp_concat),
    ("slice", _fwd_slice, _vjp_slice),
    ("pad", _fwd_pad, _vjp_pad),
    ("reshape", _fwd_reshape, _vjp_reshape),
    ("sum", _fwd_sum, _vjp_sum),
    ("mean", _fwd_mean, _vjp_mean),
    ("tanh", _fwd_tanh, _vjp_tanh),
    ("relu", _fwd_relu, _vjp_relu),
    ("exp", _fwd_exp, _vjp_exp),
    ("log", _fwd_log, _vjp_log),
    ("abs", _fwd_abs, _vjp_abs),
    ("softmax", _fwd_softmax, _vjp_softmax),
]:
    _register(_name, _fwd, _vjp)
_register("const", lambda vals, meta: None, None)
_register("leaf", lambda vals, meta: None, None)


# ---------------------------------------------------------------------------
# Public op builders
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    return a.tape.record("add", (a, _coerce(a.tape, b)))


def sub(a: Node, b: Node) -> Node:
    return a.tape.record("sub", (a, _coerce(a.tape, b)))


def mul(a: Node, b: Node) -> Node:
    return a.tape.record("mul", (a, _coerce(a.tape, b)))


def div(a: Node, b: Node) -> Node:
    return a.tape.record("div", (a, _coerce(a.tape, b)))


def scale(a: Node, factor: float) -> Node:
    return a.tape.record("scale", (a,), factor=float(factor))


def matmul(a: Node, b: Node) -> Node:
    return a.tape.record("matmul", (a, b))


def dot(a: Node, b: Node) -> Node:
    return a.tape.record("dot", (a, b))


def transpose(a: Node) -> Node:
    return a.tape.record("transpose", (a,))


def gather(table: Node, row: int) -> Node:
    """Select one row of a matrix (embedding lookup)."""
    return table.tape.record("gather", (table,), row=int(row))


def scatter(vec: Node, row: int, rows: int) -> Node:
    """Embed a vector as one row of an otherwise-zero matrix."""
    return vec.tape.record("scatter", (vec,), row=int(row), rows=int(rows))


def concat(parts: Sequence[Node]) -> Node:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: needs at least one input")
    return parts[0].tape.record("concat", parts)


def narrow(a: Node, start: int, stop: int) -> Node:
    """Contiguous 1-D slice [start, stop)."""
    return a.tape.record("slice", (a,), start=int(start), stop=int(stop))


def pad(a: Node, start: int, length: int) -> Node:
    """Embed a vector into a zero vector of the given length at offset start."""
    return a.tape.record("pad", (a,), start=int(start), length=int(length))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    return a.tape.record("reshape", (a,), shape=tuple(int(s) for s in shape))


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    return a.tape.record("sum", (a,), axis=axis)


def reduce_mean(a: Node) -> Node:
    return a.tape.record("mean", (a,))


def tanh(a: Node) -> Node:
    return a.tape.record("tanh", (a,))


def relu(a: Node) -> Node:
    return a.tape.record("relu", (a,))


def exp(a: Node) -> Node:
    return a.tape.record("exp", (a,))


def log(a: Node) -> Node:
    return a.tape.record("log", (a,))


def absolute(a: Node) -> Node:
    return a.tape.record("abs", (a,))


def softmax(a: Node) -> Node:
    return a.tape.record("softmax", (a,))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def grad(target: Node, wrt: Sequence[Node], create_graph: bool = False) -> list:
    """Return d(target)/d(w) for every node ``w`` in ``wrt``.

    ``target`` must be scalar.  A ``wrt`` node that target does not depend on
    yields a zero tensor (documented contract, not an error).  With
    ``create_graph`` the results are returned as nodes recorded on the tape,
    so scalars built from them can be differentiated again; otherwise plain
    float64 arrays are returned.  Both modes run the identical recorded
    backward pass, so first-order values are bit-identical.
    """
    tape = target.tape
    if target.value.shape != ():
        raise ShapeError(f"grad target must be scalar, got shape {target.value.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Node) or w.tape is not tape:
            raise ValueError("every wrt node must live on the target's tape")

    tape.generation += 1
    wrt_ids = {w.id for w in wrt}
    final: dict[int, Node] = {}
    adjoint: dict[int, Node] = {}
    pending: list[int] = []

    if target.requires_grad or target.id in wrt_ids:
        adjoint[target.id] = tape.constant(1.0)
        heapq.heappush(pending, -target.id)

    while pending:
        nid = -heapq.heappop(pending)
        node = tape.nodes[nid]
        gbar = adjoint.pop(nid)
        if nid in wrt_ids:
            final[nid] = gbar
        opdef = _OPS[node.op]
        if opdef.vjp is None or not node.inputs:
            continue
        input_grads = opdef.vjp(node, gbar)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not (inp.requires_grad or inp.id in wrt_ids):
                continue
            if inp.id in adjoint:
                adjoint[inp.id] = add(adjoint[inp.id], g)
            else:
                adjoint[inp.id] = g
                heapq.heappush(pending, -inp.id)

    results = []
    for w in wrt:
        node = final.get(w.id)
        if create_graph:
            results.append(node if node is not None else tape.constant(np.zeros(w.shape)))
        else:
            results.append(node.value.copy() if node is not None else np.zeros(w.shape))
    return results


def check_gradient(f: Callable[[Node], Node], point, step: float) -> float:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` takes a leaf node and must return a scalar node built from the
    recorded primitives.  Returns the max relative error, with denominator
    ``max(|analytic|, |numeric|, 1e-8)`` per element.  Any non-finite
    intermediate yields ``inf``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = tensor(point)

    t = Tape()
    x = t.variable(point)
    y = f(x)
    if y.value.shape != ():
        raise ShapeError("check_gradient expects a scalar-valued function")
    (analytic,) = grad(y, [x])

    def evaluate(p: np.ndarray) -> float:
        t2 = Tape()
        out = f(t2.variable(tensor(p)))
        return float(out.value)

    numeric = np.zeros_like(point)
    try:
        for idx in np.ndindex(point.shape if point.shape else (1,)):
            key = idx if point.shape else ()
            offset = np.zeros_like(point)
            offset[key] = step
            numeric[key] = (evaluate(point + offset) - evaluate(point - offset)) / (2.0 * step)
    except ValueError:
        return math.inf

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return math.inf
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
