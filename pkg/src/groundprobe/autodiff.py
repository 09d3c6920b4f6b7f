"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is intentionally small: tensors are plain numpy float64 arrays,
a computation is an append-only :class:`ExprGraph` of primitive operations
whose forward values are computed eagerly, and :func:`backward` walks the
graph once to produce the gradient of a one-element node with respect to
every node it depends on.

There is no broadcasting: operand shapes must match exactly, and a mismatch
raises :class:`ShapeError` naming the operation and both shapes.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

__all__ = [
    "ShapeError",
    "GraphError",
    "ExprGraph",
    "backward",
    "finite_diff",
    "as_tensor",
    "sigmoid",
    "stable_softmax",
    "OP_KINDS",
]

# Supported operation kinds. Unary/binary arity is enforced at build time;
# "concat" is variadic (>= 1 parent).
OP_KINDS = frozenset(
    {
        "input",
        "matvec",
        "matmul",
        "add",
        "mul",
        "sigmoid",
        "tanh",
        "softmax",
        "concat",
        "slice",
        "embed",
        "pick",
        "log",
        "neg",
        "sum",
    }
)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{kind}: incompatible shapes {detail}")


class GraphError(ValueError):
    """Malformed graph construction or traversal request."""


def as_tensor(value) -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(value, dtype=np.float64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # 1/(1+exp(-x)); exp overflow for very negative x still yields the
    # correct limit 0.0 in float64, so only the warning is suppressed.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def stable_softmax(x: np.ndarray) -> np.ndarray:
    # Max-subtraction keeps exp in range; result is unchanged mathematically.
    z = np.exp(x - x.max())
    return z / z.sum()


class _Node:
    __slots__ = ("kind", "parents", "attrs", "value")

    def __init__(self, kind, parents, attrs, value):
        self.kind = kind
        self.parents = parents
        self.attrs = attrs
        self.value = value


class ExprGraph:
    """Append-only expression graph; node ids are list positions.

    Parents of a node always have smaller ids, so the node list is a
    topological order by construction. Values are computed when the node is
    appended and never mutated afterwards.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def kind(self, nid: int) -> str:
        return self._nodes[nid].kind

    def value(self, nid: int) -> np.ndarray:
        return self._nodes[nid].value

    def input(self, value) -> int:
        """Append a leaf node holding `value`; returns its node id."""
        arr = as_tensor(value)
        if not np.all(np.isfinite(arr)):
            raise GraphError("input tensor contains non-finite values")
        self._nodes.append(_Node("input", (), None, arr))
        return len(self._nodes) - 1

    def op(self, kind: str, *parents: int, **attrs) -> int:
        """Append an operation node over existing nodes; returns its id.

        Attribute-carrying kinds: slice(start, stop), embed(row), pick(index).
        """
        nodes = self._nodes
        n = len(nodes)
        for p in parents:
            if not 0 <= p < n:
                raise GraphError(f"{kind}: parent id {p} out of range (graph has {n} nodes)")
        vals = [nodes[p].value for p in parents]

        if kind == "add" or kind == "mul":
            _need(kind, parents, 2)
            a, b = vals
            if a.shape != b.shape:
                raise ShapeError(kind, a.shape, b.shape)
            out = a + b if kind == "add" else a * b
            attrs_t = None
        elif kind == "matvec":
            _need(kind, parents, 2)
            a, x = vals
            if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
                raise ShapeError(kind, a.shape, x.shape)
            out = a @ x
            attrs_t = None
        elif kind == "matmul":
            _need(kind, parents, 2)
            a, b = vals
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(kind, a.shape, b.shape)
            out = a @ b
            attrs_t = None
        elif kind == "sigmoid":
            _need(kind, parents, 1)
            out = sigmoid(vals[0])
            attrs_t = None
        elif kind == "tanh":
            _need(kind, parents, 1)
            out = np.tanh(vals[0])
            attrs_t = None
        elif kind == "softmax":
            _need(kind, parents, 1)
            x = vals[0]
            if x.ndim != 1 or x.size == 0:
                raise ShapeError(kind, x.shape)
            out = stable_softmax(x)
            attrs_t = None
        elif kind == "concat":
            if not parents:
                raise GraphError("concat: needs at least one parent")
            for v in vals:
                if v.ndim != 1:
                    raise ShapeError(kind, *[v.shape for v in vals])
            out = np.concatenate(vals)
            attrs_t = None
        elif kind == "slice":
            _need(kind, parents, 1)
            x = vals[0]
            start, stop = int(attrs["start"]), int(attrs["stop"])
            if x.ndim != 1:
                raise ShapeError(kind, x.shape)
            if not 0 <= start < stop <= x.shape[0]:
                raise GraphError(f"slice: bounds [{start}:{stop}] invalid for shape {x.shape}")
            out = x[start:stop].copy()
            attrs_t = (start, stop)
        elif kind == "embed":
            _need(kind, parents, 1)
            e = vals[0]
            row = int(attrs["row"])
            if e.ndim != 2:
                raise ShapeError(kind, e.shape)
            if not 0 <= row < e.shape[0]:
                raise GraphError(f"embed: row {row} out of range for shape {e.shape}")
            out = e[row].copy()
            attrs_t = (row,)
        elif kind == "pick":
            _need(kind, parents, 1)
            x = vals[0]
            index = int(attrs["index"])
            if x.ndim != 1:
                raise ShapeError(kind, x.shape)
            if not 0 <= index < x.shape[0]:
                raise GraphError(f"pick: index {index} out of range for shape {x.shape}")
            out = x[index : index + 1].copy()
            attrs_t = (index,)
        elif kind == "log":
            _need(kind, parents, 1)
            # log(0) -> -inf without a warning; downstream finiteness checks
            # (e.g. the trainer's divergence guard) own that failure mode
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.log(vals[0])
            attrs_t = None
        elif kind == "neg":
            _need(kind, parents, 1)
            out = -vals[0]
            attrs_t = None
        elif kind == "sum":
            _need(kind, parents, 1)
            out = np.array([vals[0].sum()])
            attrs_t = None
        else:
            raise GraphError(f"unsupported op kind {kind!r}")

        nodes.append(_Node(kind, parents, attrs_t, out))
        return n


def _need(kind: str, parents, n: int):
    if len(parents) != n:
        raise GraphError(f"{kind}: expected {n} parent(s), got {len(parents)}")


# GradientMap: node id -> gradient tensor of the same shape as that node's value.
GradientMap = Dict[int, np.ndarray]


def backward(graph: ExprGraph, target: int) -> GradientMap:
    """Gradient of the one-element node `target` w.r.t. every node it depends on.

    Returns a map {node id -> d(target)/d(node)}; nodes not reachable backward
    from the target are absent. Entries must be treated as read-only.
    """
    nodes = graph._nodes
    if not 0 <= target < len(nodes):
        raise GraphError(f"backward: target id {target} out of range")
    tval = nodes[target].value
    if tval.size != 1:
        raise GraphError(f"backward: target must hold exactly one element, got shape {tval.shape}")

    grads: GradientMap = {target: np.ones_like(tval)}

    def acc(pid: int, delta: np.ndarray):
        if delta.shape != nodes[pid].value.shape:
            raise GraphError(
                f"gradient shape {delta.shape} does not match value shape "
                f"{nodes[pid].value.shape} at node {pid}"
            )
        prev = grads.get(pid)
        grads[pid] = delta if prev is None else prev + delta

    for nid in range(target, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        kind = node.kind
        if kind == "input":
            continue
        ps = node.parents
        if kind == "add":
            acc(ps[0], g)
            acc(ps[1], g)
        elif kind == "mul":
            a, b = nodes[ps[0]].value, nodes[ps[1]].value
            acc(ps[0], g * b)
            acc(ps[1], g * a)
        elif kind == "matvec":
            a, x = nodes[ps[0]].value, nodes[ps[1]].value
            acc(ps[0], np.outer(g, x))
            acc(ps[1], a.T @ g)
        elif kind == "matmul":
            a, b = nodes[ps[0]].value, nodes[ps[1]].value
            acc(ps[0], g @ b.T)
            acc(ps[1], a.T @ g)
        elif kind == "sigmoid":
            s = node.value
            acc(ps[0], g * s * (1.0 - s))
        elif kind == "tanh":
            t = node.value
            acc(ps[0], g * (1.0 - t * t))
        elif kind == "softmax":
            s = node.value
            acc(ps[0], s * (g - float(g @ s)))
        elif kind == "concat":
            off = 0
            for p in ps:
                size = nodes[p].value.shape[0]
                acc(p, g[off : off + size])
                off += size
        elif kind == "slice":
            start, stop = node.attrs
            d = np.zeros_like(nodes[ps[0]].value)
            d[start:stop] = g
            acc(ps[0], d)
        elif kind == "embed":
            (row,) = node.attrs
            d = np.zeros_like(nodes[ps[0]].value)
            d[row] = g
            acc(ps[0], d)
        elif kind == "pick":
            (index,) = node.attrs
            d = np.zeros_like(nodes[ps[0]].value)
            d[index] = g[0]
            acc(ps[0], d)
        elif kind == "log":
            acc(ps[0], g / nodes[ps[0]].value)
        elif kind == "neg":
            acc(ps[0], -g)
        elif kind == "sum":
            acc(ps[0], np.full_like(nodes[ps[0]].value, g[0]))
        else:  # pragma: no cover - op() rejects unknown kinds
            raise GraphError(f"backward: unsupported op kind {kind!r}")

    return grads


def finite_diff(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued `f` at `x`, per coordinate."""
    if step <= 0:
        raise ValueError(f"finite_diff: step must be positive, got {step}")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.reshape(-1)[i] += step
        xm.reshape(-1)[i] -= step
        flat[i] = (float(f(xp)) - float(f(xm))) / (2.0 * step)
    return grad
