"""Dense float64 matrices with a small reverse-mode differentiation engine.

Every trainable piece of the package (GCN encoders, classifier heads, the
linear autoencoder, the logistic baseline) builds its loss out of the ops in
this module and calls :func:`backward` on the scalar result.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    """A value in the expression graph.

    ``grad`` is populated by :func:`backward` for every node that requires a
    gradient.  Leaves created with ``requires_grad=True`` act as parameters;
    their ``value`` may be updated in place by an optimizer between graphs.
    """

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        requires_grad: bool = False,
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise ShapeError(f"expected a matrix, got array of shape {value.shape}")
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # reduce a gradient back to an operand that was broadcast along rows/cols
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# ops


def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return Node(a.value @ b.value, (a, b), "matmul", backward_fn=bw)


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    return Node(
        a.value + b.value,
        (a, b),
        "add",
        backward_fn=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")
    return Node(
        a.value - b.value,
        (a, b),
        "sub",
        backward_fn=lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Node, b: Node) -> Node:
    """Elementwise product (with row/column broadcasting)."""
    _check_broadcast(a, b, "mul")
    return Node(
        a.value * b.value,
        (a, b),
        "mul",
        backward_fn=lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), "scale", backward_fn=lambda g: (g * c,))


def add_scalar(a: Node, c: float) -> Node:
    return Node(a.value + c, (a,), "add_scalar", backward_fn=lambda g: (g,))


def relu(a: Node) -> Node:
    # subgradient at exactly zero is 0
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), "relu", backward_fn=lambda g: (g * mask,))


def square(a: Node) -> Node:
    return Node(a.value**2, (a,), "square", backward_fn=lambda g: (2.0 * a.value * g,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise ValueError("log of a non-positive entry")
    return Node(np.log(a.value), (a,), "log", backward_fn=lambda g: (g / a.value,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), "exp", backward_fn=lambda g: (g * out,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, (a,), "tanh", backward_fn=lambda g: (g * (1.0 - out**2),))


def clamp_min(a: Node, floor: float) -> Node:
    """max(a, floor) elementwise; no gradient through clamped entries."""
    mask = a.value > floor
    return Node(np.where(mask, a.value, floor), (a,), "clamp_min", backward_fn=lambda g: (g * mask,))


def row_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Node(out, (a,), "row_softmax", backward_fn=bw)


def row_log_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Node(out, (a,), "row_log_softmax", backward_fn=bw)


def sum_all(a: Node) -> Node:
    return Node(a.value.sum(), (a,), "sum", backward_fn=lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Node) -> Node:
    n = a.value.size
    return Node(a.value.mean(), (a,), "mean", backward_fn=lambda g: (np.full(a.shape, g[0, 0] / n),))


def hconcat(nodes: Sequence[Node]) -> Node:
    """Column-wise concatenation; rows must agree."""
    nodes = [_as_node(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"hconcat: row counts differ {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(nodes)))

    return Node(np.hstack([n.value for n in nodes]), nodes, "hconcat", backward_fn=bw)


def append_ones(a: Node) -> Node:
    """Append a constant column of ones (affine heads without a separate bias)."""
    return hconcat([a, constant(np.ones((a.shape[0], 1)))])


# ---------------------------------------------------------------------------
# backward


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


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    Gradients accumulate, so call :func:`zero_grad` on parameters between
    steps.
    """
    if root.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) root, got {root.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


def gradient_check(f: Callable[[Node], Node], point, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a parameter node to a scalar node.  Points sitting on a kink
    (e.g. a relu input of exactly zero) are not meaningful to check.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = parameter(np.array(point, dtype=np.float64))
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()

    base = x.value.copy()
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric[idx] = (f(constant(plus)).item() - f(constant(minus)).item()) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


# ---------------------------------------------------------------------------
# optimizers and randomness


class MomentumSGD:
    """Full-batch gradient descent with optional heavy-ball momentum."""

    def __init__(self, params: Sequence[Node], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


class Adam:
    def __init__(self, params: Sequence[Node], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit child seed for a named sub-task of a run."""
    key = ":".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))
