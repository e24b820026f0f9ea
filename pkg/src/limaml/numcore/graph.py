"""Tensor-level reverse-mode differentiation with higher-order support.

Every backward rule is written in terms of the same differentiable ops, so
``grad(..., create_graph=True)`` returns nodes that can themselves be
differentiated. That is what lets an outer loop differentiate through the
inner-loop gradient steps exactly.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"record": True}


class Node:
    """A value in the computation graph.

    ``parents`` and ``vjp`` are empty for leaves and constants. Nodes built
    by :func:`sgd_step` carry the step size in ``step_size``.
    """

    __slots__ = ("value", "parents", "vjp", "op", "requires_grad", "step_size", "name")

    def __init__(self, value, parents=(), vjp=None, op="const", requires_grad=False, name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad
        self.step_size = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, as_node(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def variable(value, name: str | None = None) -> Node:
    """Leaf node that gradients are taken with respect to."""
    return Node(np.asarray(value, dtype=np.float64), op="var", requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


@contextlib.contextmanager
def no_grad():
    """Build values only; no parent links are recorded."""
    prev = _state["record"]
    _state["record"] = False
    try:
        yield
    finally:
        _state["record"] = prev


@contextlib.contextmanager
def _recording(flag: bool):
    prev = _state["record"]
    _state["record"] = flag
    try:
        yield
    finally:
        _state["record"] = prev


def _make(value, parents: tuple, vjp: Callable, op: str) -> Node:
    if _state["record"] and any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, op, True)
    return Node(value, op=op)


def _sum_to_shape(value: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if value.shape == shape:
        return value
    lead = value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and value.shape[i + lead] != 1
    )
    out = value.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


# ---------------------------------------------------------------- shape ops


def sum_to(a: Node, shape: tuple[int, ...]) -> Node:
    if a.shape == shape:
        return a
    src = a.shape
    return _make(_sum_to_shape(a.value, shape), (a,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(a: Node, shape: tuple[int, ...]) -> Node:
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.value, shape), (a,), lambda g: (sum_to(g, src),), "broadcast")


def transpose(a: Node) -> Node:
    return _make(a.value.T, (a,), lambda g: (transpose(g),), "transpose")


def reduce_sum(a: Node) -> Node:
    src = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (broadcast_to(g, src),), "sum")


def mean(a: Node) -> Node:
    return scale(reduce_sum(a), 1.0 / a.value.size)


def take_rows(table: Node, idx: np.ndarray) -> Node:
    """Gather rows ``table[idx]``; the backward pass is a scatter-add."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = table.shape[0]
    return _make(table.value[idx], (table,), lambda g: (scatter_rows(g, idx, rows),), "take_rows")


def scatter_rows(a: Node, idx: np.ndarray, rows: int) -> Node:
    out = np.zeros((rows,) + a.shape[1:])
    np.add.at(out, idx, a.value)
    return _make(out, (a,), lambda g: (take_rows(g, idx),), "scatter_rows")


def concat_cols(parts: Sequence[Node]) -> Node:
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(slice_cols(g, int(bounds[i]), int(bounds[i + 1])) for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), tuple(parts), vjp, "concat")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    width = a.shape[1]
    return _make(
        a.value[:, start:stop], (a,), lambda g: (pad_cols(g, start, width),), "slice_cols"
    )


def pad_cols(a: Node, start: int, width: int) -> Node:
    stop = start + a.shape[1]
    out = np.zeros((a.shape[0], width))
    out[:, start:stop] = a.value
    return _make(out, (a,), lambda g: (slice_cols(g, start, stop),), "pad_cols")


# ---------------------------------------------------------------- arithmetic


def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _make(
        a.value - b.value, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub"
    )


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (neg(g),), "neg")


def mul(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (
            sum_to(mul(g, b), sa) if a.requires_grad else None,
            sum_to(mul(g, a), sb) if b.requires_grad else None,
        ),
        "mul",
    )


def scale(a: Node, c: float) -> Node:
    """Multiply by a constant scalar or constant array (not differentiated)."""
    return _make(a.value * c, (a,), lambda g: (scale(g, c),), "scale")


def matmul(a: Node, b: Node) -> Node:
    return _make(
        a.value @ b.value,
        (a, b),
        lambda g: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ),
        "matmul",
    )


def linear(x: Node, w: Node, b: Node) -> Node:
    """``x @ w + b`` as one node; ``b`` broadcasts over rows."""

    def vjp(g):
        gx = matmul(g, transpose(w)) if x.requires_grad else None
        gw = matmul(transpose(x), g) if w.requires_grad else None
        return gx, gw, sum_to(g, b.shape)

    return _make(x.value @ w.value + b.value, (x, w, b), vjp, "linear")


def sgd_step(p: Node, g: Node, step_size: float) -> Node:
    """``p - step_size * g``; the node records the step size it used."""
    node = _make(
        p.value - step_size * g.value,
        (p, g),
        lambda gout: (gout, scale(gout, -step_size)),
        "sgd_step",
    )
    node.step_size = step_size
    return node


# ---------------------------------------------------------------- activations


def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g: (scale(g, mask),), "relu")


def tanh(a: Node) -> Node:
    out_holder: list[Node] = []

    def vjp(g):
        t = out_holder[0]
        return (mul(g, sub(constant(1.0), mul(t, t))),)

    out = _make(np.tanh(a.value), (a,), vjp, "tanh")
    out_holder.append(out)
    return out


def _sigmoid_value(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def sigmoid(a: Node) -> Node:
    out_holder: list[Node] = []

    def vjp(g):
        s = out_holder[0]
        return (mul(g, mul(s, sub(constant(1.0), s))),)

    out = _make(_sigmoid_value(np.asarray(a.value, dtype=np.float64)), (a,), vjp, "sigmoid")
    out_holder.append(out)
    return out


def identity(a: Node) -> Node:
    return a


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": identity,
}


# ---------------------------------------------------------------- losses


def bce_with_logits(z: Node, y: np.ndarray, eps: float) -> Node:
    """Element-wise cross-entropy of ``sigmoid(z)`` against labels ``y``.

    The probability is clamped into ``[eps, 1 - eps]`` before the log; the
    clamp has zero derivative outside that range.
    """
    y = np.asarray(y, dtype=np.float64)
    p = _sigmoid_value(np.asarray(z.value, dtype=np.float64))
    pc = np.clip(p, eps, 1.0 - eps)
    inside = ((p >= eps) & (p <= 1.0 - eps)).astype(np.float64)
    value = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))

    def vjp(g):
        resid = sub(sigmoid(z), constant(y))
        return (scale(mul(g, resid), inside),)

    return _make(value, (z,), vjp, "bce")


# ---------------------------------------------------------------- backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Node, wrt: Iterable[Node], create_graph: bool = False) -> list[Node]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``wrt``.

    With ``create_graph`` the returned gradients are themselves graph nodes
    (differentiable again); otherwise they are constants. Nodes not reachable
    from ``loss`` get a zero gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"grad() needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    if not loss.requires_grad:
        return [constant(np.zeros_like(w.value)) for w in wrt]
    grads: dict[int, Node] = {}
    with _recording(create_graph):
        grads[id(loss)] = constant(np.ones_like(loss.value))
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, contrib in zip(node.parents, node.vjp(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else constant(np.zeros_like(w.value)))
    return out
