"""Minimal define-by-run reverse-mode automatic differentiation on numpy arrays.

Tensors hold float64 data. Every operation whose inputs need gradients appends a
node to a :class:`Graph`; :func:`backward` walks that graph once, in exact reverse
insertion order, and deposits ``d(loss)/d(leaf)`` into each leaf's ``grad``.
A graph that has been backpropagated is dead: feeding any of its tensors into a
new operation, or calling backward on it again, raises :class:`GraphError`.

Broadcasting is limited to a scalar second operand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Graph:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def absorb(self, other: "Graph") -> None:
        """Append another live graph's nodes; both orders stay topological."""
        for node in other.nodes:
            node.out.graph = self
        self.nodes.extend(other.nodes)
        other.nodes = []
        other.consumed = True


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    # maps grad of out -> tuple of grads for inputs (None where not needed)
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "graph", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.graph: Graph | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_tape(t: Tensor) -> bool:
    return t.requires_grad or t.graph is not None


def _record(name: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out._leaf = False
    out.graph = None
    out.requires_grad = False
    tracked = [t for t in inputs if _needs_tape(t)]
    if not tracked:
        return out
    graph = None
    for t in tracked:
        if t.graph is None:
            continue
        if t.graph.consumed:
            raise GraphError(f"{name}: input belongs to a graph that was already backpropagated")
        if graph is None:
            graph = t.graph
        elif graph is not t.graph:
            graph.absorb(t.graph)
    if graph is None:
        graph = Graph()
    out.graph = graph
    out.requires_grad = True
    graph.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _scalar_operand(name: str, a: Tensor, b):
    """Returns (tensor_b, is_scalar) after the equal-shape-or-scalar check."""
    if not isinstance(b, Tensor):
        b = np.asarray(b, dtype=np.float64)
        if b.ndim != 0:
            b = Tensor(b)
        else:
            return Tensor(b), True
    if b.data.ndim == 0:
        return b, True
    if b.shape != a.shape:
        raise ShapeError(f"{name}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    return b, False


def _reduce_scalar(g: np.ndarray, scalar: bool) -> np.ndarray:
    return np.asarray(g.sum()) if scalar else g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b, sc = _scalar_operand("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (g, _reduce_scalar(g, sc)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b, sc = _scalar_operand("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (g, -_reduce_scalar(g, sc)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b, sc = _scalar_operand("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (g * bd if _needs_tape(a) else None,
                              _reduce_scalar(g * ad, sc) if _needs_tape(b) else None))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T if _needs_tape(a) else None,
                              ad.T @ g if _needs_tape(b) else None))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def clamp01(a) -> Tensor:
    """Clip to [0, 1]; gradient passes unchanged on the closed interval, zero outside."""
    a = as_tensor(a)
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    return _record("clamp01", np.clip(a.data, 0.0, 1.0), (a,), lambda g: (g * inside,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record("mean", np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    a = as_tensor(a)
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"log_softmax: expected rank 1 or 2, got shape {list(a.shape)}")
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _record("log_softmax", out, (a,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def outer_channels(gray, color) -> Tensor:
    """Per-row outer product flattened pixel-major: out[b, p*C + c] = gray[b, p] * color[b, c]."""
    gray, color = as_tensor(gray), as_tensor(color)
    if gray.data.ndim != 2 or color.data.ndim != 2 or gray.shape[0] != color.shape[0]:
        raise ShapeError(f"outer_channels: shape mismatch {list(gray.shape)} vs {list(color.shape)}")
    gd, cd = gray.data, color.data
    B, P = gd.shape
    C = cd.shape[1]

    def back(g):
        g3 = g.reshape(B, P, C)
        return (np.einsum("bpc,bc->bp", g3, cd) if _needs_tape(gray) else None,
                np.einsum("bpc,bp->bc", g3, gd) if _needs_tape(color) else None)

    out = (gd[:, :, None] * cd[:, None, :]).reshape(B, P * C)
    return _record("outer_channels", out, (gray, color), back)


def linear(x, w, b) -> Tensor:
    """x @ w + b with the bias row added through a ones-column matmul."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    ones = Tensor(np.ones((x.shape[0], 1)))
    bias = matmul(ones, reshape_row(b))
    return add(matmul(x, w), bias)


def reshape_row(b: Tensor) -> Tensor:
    if b.data.ndim == 2:
        return b
    n = b.shape[0]
    return _record("reshape_row", b.data.reshape(1, n), (b,), lambda g: (g.reshape(n),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [B, C], got {list(logits.shape)}")
    B, C = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise ShapeError(f"cross_entropy: {B} logit rows vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    return soft_cross_entropy(logits, onehot)


def soft_cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of -sum_c targets[c] * log softmax(logits)[c]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"soft_cross_entropy: shape mismatch {list(logits.shape)} vs {list(targets.shape)}")
    B = logits.shape[0]
    return mul(sum(mul(log_softmax(logits), Tensor(targets))), -1.0 / B)


def per_example_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Forward-only per-row cross-entropy, used for bookkeeping outside a graph."""
    x = np.asarray(logits, dtype=np.float64)
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1)) + m[:, 0]
    return lse - x[np.arange(x.shape[0]), np.asarray(labels)]


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    graph = loss.graph
    if graph is None:
        if loss.requires_grad and loss._leaf:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise GraphError("backward: loss does not depend on any tensor requiring grad")
    if graph.consumed:
        raise GraphError("backward: graph already backpropagated")
    graph.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not _needs_tape(inp):
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                grads[k] = grads[k] + gi if k in grads else gi
    graph.nodes.clear()


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update of ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} moment slots")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam_step: shape mismatch param {list(p.shape)} grad {list(g.shape)} "
                             f"state {list(m.shape)}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
