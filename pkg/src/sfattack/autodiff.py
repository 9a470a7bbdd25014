"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Graph is a tape: operations append nodes in topological order, and
backward() sweeps the tape once in reverse.  Tensors are thin handles
around numpy arrays; a tensor either lives on a graph (tracked) or is a
plain constant.  The primitive set is deliberately small: elementwise
add/sub/mul, scalar-mul, matmul, exp, log, sqrt, relu, sum, mean,
row-sum, broadcast, concat, gather-rows, rowwise L2 norm, and pairwise
squared distances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested primitive."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the primitive."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar root, reuse, ...)."""


@dataclass
class _Node:
    tag: str
    parent_ids: tuple
    value: np.ndarray
    # maps the output gradient to one gradient per parent (None for
    # non-differentiable parents such as constants)
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


class Graph:
    """Append-only tape of primitive operations, single-use per backward."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def leaf(self, data) -> "Tensor":
        """Register an input tensor whose gradient backward() will report."""
        value = _as_array(data)
        if not np.all(np.isfinite(value)):
            raise DomainError("leaf values must be finite")
        return self._record("leaf", (), value, None)

    def _record(self, tag, parent_ids, value, vjp) -> "Tensor":
        self._nodes.append(_Node(tag, tuple(parent_ids), value, vjp))
        return Tensor(value, self, len(self._nodes) - 1)

    def leaf_ids(self):
        return [i for i, n in enumerate(self._nodes) if n.tag == "leaf"]


class Tensor:
    """Dense float64 array, optionally attached to a differentiation graph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph: Optional[Graph] = None, node_id: Optional[int] = None):
        self.data = _as_array(data)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, other)
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(data) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    return np.asarray(data, dtype=np.float64)


def constant(data) -> Tensor:
    """Wrap a value as an untracked tensor."""
    return Tensor(data)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(tag, parents: Sequence[Tensor], value, vjp) -> Tensor:
    graphs = {p.graph for p in parents if p.graph is not None}
    if len(graphs) > 1:
        raise GraphError("operands belong to different graphs")
    if not graphs:
        return Tensor(value)
    graph = graphs.pop()
    ids = tuple(p.node_id if p.graph is graph else None for p in parents)
    return graph._record(tag, ids, value, vjp)


# -- broadcasting (limited: equal shapes, scalar-with-tensor, row/column
#    vector with matrix) -------------------------------------------------

def _broadcast_ok(sa, sb):
    if sa == sb:
        return sa
    for s, t in ((sa, sb), (sb, sa)):
        if s == () or s == (1, 1):
            return t
        if len(t) == 2:
            n, m = t
            if s in ((m,), (1, m), (n, 1)):
                return t
    raise ShapeError(f"cannot broadcast {sa} with {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    n, m = g.shape
    if shape == (m,):
        return g.sum(axis=0)
    if shape == (1, m):
        return g.sum(axis=0, keepdims=True)
    if shape == (n, 1):
        return g.sum(axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


# -- elementwise primitives ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_ok(a.shape, b.shape)
    value = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), value,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_ok(a.shape, b.shape)
    value = a.data - b.data
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), value,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_ok(a.shape, b.shape)
    va, vb = a.data, b.data
    sa, sb = a.shape, b.shape
    return _emit("mul", (a, b), va * vb,
                 lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)))


def smul(a, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)
    return _emit("scalar-mul", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (N,K)x(K,M), got {a.shape} and {b.shape}")
    va, vb = a.data, b.data
    return _emit("matmul", (a, b), va @ vb,
                 lambda g: (g @ vb.T, va.T @ g))


def exp(a) -> Tensor:
    a = _coerce(a)
    value = np.exp(a.data)
    return _emit("exp", (a,), value, lambda g: (g * value,))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    va = a.data
    return _emit("log", (a,), np.log(va), lambda g: (g / va,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative input")
    value = np.sqrt(a.data)

    def vjp(g):
        # subgradient 0 at exactly-zero input, same convention as rownorm
        safe = np.where(value > 0.0, value, 1.0)
        return (np.where(value > 0.0, np.asarray(g) / (2.0 * safe), 0.0),)

    return _emit("sqrt", (a,), value, vjp)


def relu(a) -> Tensor:
    a = _coerce(a)
    va = a.data
    mask = va > 0.0
    return _emit("relu", (a,), np.where(mask, va, 0.0), lambda g: (g * mask,))


# -- reductions and shape primitives ------------------------------------

def tsum(a) -> Tensor:
    a = _coerce(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()),
                 lambda g: (np.full(shape, float(g)),))


def tmean(a) -> Tensor:
    a = _coerce(a)
    shape = a.shape
    size = a.data.size
    if size == 0:
        raise ShapeError("mean of an empty tensor")
    return _emit("mean", (a,), np.asarray(a.data.mean()),
                 lambda g: (np.full(shape, float(g) / size),))


def row_sum(a) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError("row-sum expects a matrix")
    n, m = a.shape
    return _emit("row-sum", (a,), a.data.sum(axis=1),
                 lambda g: (np.repeat(g[:, None], m, axis=1),))


def broadcast(a, shape, axis: Optional[int] = None) -> Tensor:
    """Expand a scalar, row, or column vector to the given matrix shape.

    axis is the expanded axis: 0 replicates a row of length M down N rows,
    1 replicates a column of length N across M columns.  Scalars ignore it.
    """
    a = _coerce(a)
    shape = tuple(shape)
    src = a.shape
    if src == shape:
        value = a.data.copy()
        return _emit("broadcast", (a,), value, lambda g: (g,))
    if src in ((), (1,), (1, 1)):
        value = np.full(shape, float(a.data.reshape(())))
        return _emit("broadcast", (a,), value,
                     lambda g: (np.asarray(g.sum()).reshape(src),))
    if len(shape) != 2:
        raise ShapeError(f"broadcast target must be a matrix, got {shape}")
    n, m = shape
    if axis is None:
        if src in ((m,), (1, m)) and n != m:
            axis = 0
        elif src in ((n,), (n, 1)) and n != m:
            axis = 1
        else:
            raise ShapeError(f"ambiguous broadcast {src} -> {shape}, pass axis")
    if axis == 0 and src in ((m,), (1, m)):
        value = np.broadcast_to(a.data.reshape(1, m), shape).copy()
        return _emit("broadcast", (a,), value,
                     lambda g: (g.sum(axis=0).reshape(src),))
    if axis == 1 and src in ((n,), (n, 1)):
        value = np.broadcast_to(a.data.reshape(n, 1), shape).copy()
        return _emit("broadcast", (a,), value,
                     lambda g: (g.sum(axis=1).reshape(src),))
    raise ShapeError(f"cannot broadcast {src} -> {shape} along axis {axis}")


def concat(a, b, axis: int = 0) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat operands must have equal rank")
    if axis not in (0, 1) or axis >= a.data.ndim:
        raise ShapeError(f"bad concat axis {axis}")
    other = 1 - axis if a.data.ndim == 2 else None
    if other is not None and a.shape[other] != b.shape[other]:
        raise ShapeError(f"concat shapes {a.shape} and {b.shape} disagree")
    value = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _emit("concat", (a, b), value, vjp)


def gather_rows(a, indices) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError("gather-rows expects a matrix")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather-rows indices must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather-rows index out of range")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather-rows", (a,), a.data[idx], vjp)


def rownorm(a) -> Tensor:
    """Rowwise Euclidean norm of a matrix; subgradient 0 at zero rows."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError("rowwise-L2-norm expects a matrix")
    va = a.data
    value = np.sqrt((va * va).sum(axis=1))

    def vjp(g):
        safe = np.where(value > 0.0, value, 1.0)
        out = (g / safe)[:, None] * va
        out[value == 0.0] = 0.0
        return (out,)

    return _emit("rowwise-L2-norm", (a,), value, vjp)


def pairwise_sqdist(a, b) -> Tensor:
    """Matrix of squared Euclidean distances between rows of a and b."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise-sqdist needs (N,d) and (M,d), got {a.shape}, {b.shape}")
    va, vb = a.data, b.data
    diff = va[:, None, :] - vb[None, :, :]
    value = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * va - g @ vb)
        gb = 2.0 * (g.sum(axis=0)[:, None] * vb - g.T @ va)
        return ga, gb

    return _emit("pairwise-sqdist", (a, b), value, vjp)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": smul,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "sum": tsum,
    "mean": tmean,
    "row-sum": row_sum,
    "broadcast": broadcast,
    "concat": concat,
    "gather-rows": gather_rows,
    "rowwise-L2-norm": rownorm,
    "pairwise-sqdist": pairwise_sqdist,
}


def primitive_forward(op: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Dispatch a primitive by tag; records a node when inputs are tracked."""
    if op not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    return _PRIMITIVES[op](*inputs, **(attrs or {}))


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns gradients for every leaf.

    The graph is consumed: a second backward over the same graph raises.
    """
    if root.graph is None:
        raise GraphError("root is not attached to a graph")
    if root.data.shape != ():
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    graph = root.graph
    if graph._consumed:
        raise GraphError("graph already consumed by a previous backward")
    graph._consumed = True

    nodes = graph._nodes
    grads: list[Optional[np.ndarray]] = [None] * len(nodes)
    grads[root.node_id] = np.ones(())
    for i in range(root.node_id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parent_ids, node.vjp(g)):
            if pid is None or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    out = {}
    for i in graph.leaf_ids():
        out[i] = grads[i] if grads[i] is not None else np.zeros(nodes[i].value.shape)
    return out


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int


def gradcheck(builder, seed: int, h: float = 1e-5,
              rel_tol: float = 1e-4, abs_tol: float = 1e-8) -> GradcheckReport:
    """Compare backward() against central finite differences.

    builder(rng) must return (fn, leaf_values) where fn maps one tensor per
    leaf value to a scalar tensor.  Coordinates where both the analytic and
    numeric gradients are below abs_tol are compared absolutely.
    """
    rng = np.random.default_rng(seed)
    fn, leaf_values = builder(rng)
    leaf_values = [np.asarray(v, dtype=np.float64) for v in leaf_values]

    graph = Graph()
    leaves = [graph.leaf(v) for v in leaf_values]
    root = fn(*leaves)
    if not np.isfinite(root.data):
        raise DomainError("gradcheck forward value is not finite")
    grads = backward(root)
    analytic = [grads[t.node_id] for t in leaves]

    def eval_at(values) -> float:
        out = fn(*[constant(v) for v in values])
        return float(out.data)

    max_rel = 0.0
    n_coords = 0
    for k, base in enumerate(leaf_values):
        flat_a = analytic[k].ravel()
        for j in range(base.size):
            n_coords += 1
            bumped = [v.copy() for v in leaf_values]
            bumped[k].ravel()[j] = base.ravel()[j] + h
            fp = eval_at(bumped)
            bumped[k].ravel()[j] = base.ravel()[j] - h
            fm = eval_at(bumped)
            fd = (fp - fm) / (2.0 * h)
            a = flat_a[j]
            denom = max(abs(a), abs(fd))
            if denom <= abs_tol:
                continue
            err = abs(a - fd) / denom if abs(a - fd) > abs_tol else 0.0
            max_rel = max(max_rel, err)
    return GradcheckReport(max_rel_err=max_rel, passed=max_rel < rel_tol,
                           n_coords=n_coords)
