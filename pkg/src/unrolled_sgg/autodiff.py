"""Dense-matrix reverse-mode differentiation on an explicit tape.

Every value is a 2-D ``float64`` numpy array. Operations append a
:class:`Node` to the tape of their first argument; :meth:`Tape.backward`
walks the tape in reverse and dispatches on each node's rule tag through
:data:`BACKWARD_RULES`.

Broadcasting is deliberately narrow: the only allowed mismatch in
elementwise ops is a 1-row operand applied over every row of the other
operand (bias terms). Everything else raises :class:`DimensionError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Node:
    __slots__ = ("tape", "value", "grad", "parents", "rule", "ctx", "requires_grad", "trainable")

    def __init__(self, tape, value, parents=(), rule="leaf", ctx=None, trainable=False):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.rule = rule
        self.ctx = ctx
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.rule}, shape={self.value.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elementwise(self, other, "hadamard")

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of shape {arr.shape}")
    return arr


class Tape:
    """Ordered record of nodes; insertion order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, parents=(), rule="leaf", ctx=None, trainable=False) -> Node:
        node = Node(self, value, parents, rule, ctx, trainable)
        self.nodes.append(node)
        return node

    def leaf(self, value, trainable: bool = True) -> Node:
        return self._push(_as_matrix(value), trainable=trainable)

    def const(self, value) -> Node:
        return self._push(_as_matrix(value), trainable=False)

    def reset(self):
        """Clear gradients so the same tape can be differentiated again."""
        for node in self.nodes:
            node.grad = None

    def backward(self, output: Node) -> None:
        if output.tape is not self:
            raise ContractError("output node belongs to a different tape")
        if output.value.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 output, got {output.value.shape}")
        self.reset()
        output.grad = np.ones((1, 1))
        stop = self.nodes.index(output)
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or not node.parents or not node.requires_grad:
                continue
            grads = BACKWARD_RULES[node.rule](node, node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g
        for node in self.nodes:
            if node.trainable and node.grad is None:
                node.grad = np.zeros_like(node.value)


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return _tape_of(a, b)._push(a.value @ b.value, (a, b), "matmul")


def _broadcast_kind(a: Node, b: Node, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return "b_row"
    if a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return "a_row"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "hadamard": np.multiply,
}


def elementwise(a: Node, b: Node, kind: str) -> Node:
    """Elementwise ``add``, ``sub`` or ``hadamard``.

    A 1-row operand is broadcast over the rows of the other operand.
    """
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    bc = _broadcast_kind(a, b, kind)
    value = _ELEMENTWISE[kind](a.value, b.value)
    return _tape_of(a, b)._push(value, (a, b), kind, ctx=bc)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def hadamard(a, b):
    return elementwise(a, b, "hadamard")


def scale(a: Node, c: float) -> Node:
    return a.tape._push(a.value * c, (a,), "scale", ctx=c)


def relu(a: Node) -> Node:
    return a.tape._push(np.maximum(a.value, 0.0), (a,), "relu")


def transpose(a: Node) -> Node:
    return a.tape._push(a.value.T.copy(), (a,), "transpose")


def sqrt(a: Node) -> Node:
    return a.tape._push(np.sqrt(a.value), (a,), "sqrt")


def sum_all(a: Node) -> Node:
    return a.tape._push(np.array([[a.value.sum()]]), (a,), "sum_all")


def column_sums(a: Node) -> Node:
    """1×cols matrix of column sums."""
    return a.tape._push(a.value.sum(axis=0, keepdims=True), (a,), "column_sums")


def gather_rows(a: Node, index: Sequence[int]) -> Node:
    idx = np.asarray(index, dtype=np.int64)
    return a.tape._push(a.value[idx], (a,), "gather_rows", ctx=idx)


def pick(a: Node, cols: Sequence[int]) -> Node:
    """Select one entry per row, ``out[i, 0] = a[i, cols[i]]``."""
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (a.shape[0],):
        raise DimensionError(f"pick: need {a.shape[0]} column indices, got {cols.shape}")
    rows = np.arange(a.shape[0])
    return a.tape._push(a.value[rows, cols].reshape(-1, 1), (a,), "pick", ctx=cols)


def reshape(a: Node, rows: int, cols: int) -> Node:
    if rows * cols != a.value.size:
        raise DimensionError(f"reshape: {a.shape} -> ({rows}, {cols})")
    return a.tape._push(a.value.reshape(rows, cols).copy(), (a,), "reshape")


def concat_cols(parts: Sequence[Node]) -> Node:
    if not parts:
        raise DimensionError("concat_cols: nothing to concatenate")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=1)
    return _tape_of(*parts)._push(value, parts, "concat_cols", ctx=widths)


def _check_mask(a: Node, mask):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"softmax mask {mask.shape} vs scores {a.shape}")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise DegenerateRowError(f"row {int(empty[0])} is fully masked")
    return mask


def _masked_shift(x: np.ndarray, mask):
    if mask is None:
        return x - x.max(axis=1, keepdims=True)
    z = np.where(mask, x, -np.inf)
    return np.where(mask, z - z.max(axis=1, keepdims=True), -np.inf)


def row_softmax(a: Node, mask=None) -> Node:
    """Row-wise softmax; entries where ``mask`` is False come out exactly 0."""
    mask = _check_mask(a, mask)
    e = np.exp(_masked_shift(a.value, mask))
    value = e / e.sum(axis=1, keepdims=True)
    return a.tape._push(value, (a,), "row_softmax")


def row_log_softmax(a: Node) -> Node:
    z = _masked_shift(a.value, None)
    value = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return a.tape._push(value, (a,), "row_log_softmax")


# ---------------------------------------------------------------------------
# backward rules: (node, upstream gradient) -> one gradient per parent


def _unbroadcast(g, kind, which):
    if (kind == "b_row" and which == 1) or (kind == "a_row" and which == 0):
        return g.sum(axis=0, keepdims=True)
    return g


def _bw_matmul(node, g):
    a, b = node.parents
    return g @ b.value.T, a.value.T @ g


def _bw_add(node, g):
    return _unbroadcast(g, node.ctx, 0), _unbroadcast(g, node.ctx, 1)


def _bw_sub(node, g):
    return _unbroadcast(g, node.ctx, 0), _unbroadcast(-g, node.ctx, 1)


def _bw_hadamard(node, g):
    a, b = node.parents
    ga = _unbroadcast(g * b.value, node.ctx, 0) if a.requires_grad else None
    gb = _unbroadcast(g * a.value, node.ctx, 1) if b.requires_grad else None
    return ga, gb


def _bw_softmax(node, g):
    s = node.value
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def _bw_log_softmax(node, g):
    s = np.exp(node.value)
    return (g - s * g.sum(axis=1, keepdims=True),)


def _bw_sqrt(node, g):
    # zero subgradient at 0 (an all-zero column in an l2,1 norm)
    v = node.value
    safe = np.where(v > 0, v, 1.0)
    return (np.where(v > 0, g / (2.0 * safe), 0.0),)


def _bw_gather_rows(node, g):
    (a,) = node.parents
    out = np.zeros_like(a.value)
    np.add.at(out, node.ctx, g)
    return (out,)


def _bw_pick(node, g):
    (a,) = node.parents
    out = np.zeros_like(a.value)
    out[np.arange(a.shape[0]), node.ctx] = g[:, 0]
    return (out,)


def _bw_concat(node, g):
    splits = np.cumsum(node.ctx)[:-1]
    return tuple(np.split(g, splits, axis=1))


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "hadamard": _bw_hadamard,
    "scale": lambda node, g: (g * node.ctx,),
    # subgradient at 0 is 0
    "relu": lambda node, g: (g * (node.parents[0].value > 0),),
    "transpose": lambda node, g: (g.T,),
    "sqrt": _bw_sqrt,
    "sum_all": lambda node, g: (np.full(node.parents[0].shape, g[0, 0]),),
    "column_sums": lambda node, g: (np.broadcast_to(g, node.parents[0].shape).copy(),),
    "gather_rows": _bw_gather_rows,
    "pick": _bw_pick,
    "reshape": lambda node, g: (g.reshape(node.parents[0].shape),),
    "concat_cols": _bw_concat,
    "row_softmax": _bw_softmax,
    "row_log_softmax": _bw_log_softmax,
}


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a matrix."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
