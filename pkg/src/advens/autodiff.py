"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every primitive returns a new :class:`Tensor`. When at least one operand
requires a gradient, the result remembers its operands and a backward rule;
:func:`backward` linearises that record into a :class:`Graph` whose nodes are
in topological order and runs the rules in reverse.

Tensors are treated as immutable values. Gradients are returned in a mapping
rather than written onto the tensors, so parameters can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_operands", "_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._operands: tuple[Tensor, ...] = ()
        self._rule: BackwardRule | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._operands

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_mul(as_tensor(other), -1.0))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, op: str, operands: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(t.requires_grad for t in operands):
        out.requires_grad = True
        out._operands = tuple(operands)
        out._rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, "matmul", (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, "add", (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, "mul", (a, b), rule)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no operands")
    ndim = tensors[0].ndim
    if ndim == 0:
        raise DimensionError("concat: scalar operands")
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record(a.data.T, "transpose", (a,), lambda g: (g.T,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, "sum", (a,), rule)


def log_softmax(logits: Tensor) -> Tensor:
    """Log-softmax over the last axis, stabilised by the row maximum."""
    logits = as_tensor(logits)
    if logits.ndim == 0:
        raise DimensionError("log_softmax: scalar input")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, "log_softmax", (logits,), rule)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy ``-log softmax(logits)[label]``.

    A vector of logits with an integer label gives a scalar. A ``[B, C]`` batch
    with ``B`` labels gives the ``B`` per-example losses (not their sum).
    """
    logits = as_tensor(logits)
    if logits.ndim not in (1, 2):
        raise DimensionError(f"cross_entropy: logits must be [C] or [B, C], got {logits.shape}")
    num_classes = logits.shape[-1]
    labels = np.asarray(label)
    if logits.ndim == 1 and labels.ndim != 0:
        raise DimensionError("cross_entropy: a single logit vector takes one label")
    if logits.ndim == 2 and labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: {logits.shape[0]} logit rows but labels of shape {labels.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise IndexError(f"cross_entropy: label out of range for {num_classes} classes")

    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    onehot = np.zeros_like(z)
    if z.ndim == 1:
        onehot[labels] = 1.0
        out = -logp[labels]
    else:
        rows = np.arange(z.shape[0])
        onehot[rows, labels] = 1.0
        out = -logp[rows, labels]
    probs = np.exp(logp)

    def rule(g):
        g = np.asarray(g)
        if z.ndim == 2:
            g = g[:, None]
        return (g * (probs - onehot),)

    return _record(out, "cross_entropy", (logits,), rule)


# ---------------------------------------------------------------------------
# reverse pass


@dataclass(frozen=True)
class Node:
    tensor: Tensor
    operands: tuple[int, ...]


class Graph:
    """Append-only list of operation records reachable from one output.

    Nodes are stored in topological order, so every operand index of node ``i``
    is smaller than ``i`` and the output is the last node.
    """

    def __init__(self, output: Tensor):
        self.nodes: list[Node] = []
        index: dict[int, int] = {}
        # iterative post-order DFS; deep MLP graphs would blow the recursion limit
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in index:
                continue
            if expanded:
                ops = tuple(index[id(o)] for o in t._operands if o.requires_grad)
                index[id(t)] = len(self.nodes)
                self.nodes.append(Node(t, ops))
                continue
            stack.append((t, True))
            for o in reversed(t._operands):
                if o.requires_grad and id(o) not in index:
                    stack.append((o, False))
        self._index = index

    def __len__(self):
        return len(self.nodes)

    def index_of(self, tensor: Tensor) -> int | None:
        return self._index.get(id(tensor))


GradMap = dict


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor]) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to the leaves in ``wrt``.

    Returns a dict keyed like ``wrt`` (names for a mapping, positions for a
    sequence). Leaves that do not influence the loss get zero arrays.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
    if not loss.requires_grad:
        return {k: np.zeros_like(t.data) for k, t in items}

    graph = Graph(loss)
    grads: list[np.ndarray | None] = [None] * len(graph)
    grads[-1] = np.ones_like(loss.data)
    for i in range(len(graph) - 1, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.tensor.is_leaf:
            continue
        parts = node.tensor._rule(g)
        grad_operands = [o for o in node.tensor._operands if o.requires_grad]
        grad_parts = [p for o, p in zip(node.tensor._operands, parts) if o.requires_grad]
        for operand, j, part in zip(grad_operands, node.operands, grad_parts):
            grads[j] = part if grads[j] is None else grads[j] + part

    out = {}
    for key, t in items:
        j = graph.index_of(t)
        g = grads[j] if j is not None else None
        out[key] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One heavy-ball SGD step: ``v <- momentum*v + g``, ``p <- p - lr*v``.

    Returns fresh ``(params, velocity)`` dicts; the inputs are not modified.
    """
    if lr <= 0:
        raise ContractError(f"sgd_step: lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ContractError(f"sgd_step: momentum must lie in [0, 1), got {momentum}")
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"sgd_step: no gradient for parameter(s) {missing}")
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        v = grads[name] if velocity is None else momentum * velocity[name] + grads[name]
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity
