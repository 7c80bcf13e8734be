"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operation that produced them; ``backward`` walks the
recorded graph in reverse topological order. Only the primitives the encoder
and losses need are provided.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Invalid use of a graph (e.g. backward before forward)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out leading axes and axes that were size-1 in the operand
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; a python scalar operand is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(a.data / b.data, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation

def matmul(a, b) -> Tensor:
    """Matrix product with numpy's stacking rules (1-D, 2-D and batched)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}: {exc}") from None

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need >= 2 dims, got {a.shape}")
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    """Indexing; the backward pass scatters with accumulation (``np.add.at``)."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc} for shape {a.shape}") from None

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward, "stack")


# ---------------------------------------------------------------------------
# reductions

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return _node(out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,), "mean")


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def hinge(a) -> Tensor:
    """[z]_+ = max(z, 0) with subgradient 0 at z == 0, so a loss sitting
    exactly on its margin contributes no gradient."""
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "hinge")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive argument")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def arccos(a) -> Tensor:
    """Defined on [-1, 1]; the derivative is infinite at the endpoints."""
    a = as_tensor(a)
    if np.any(np.abs(a.data) > 1.0):
        raise ValueError("arccos: argument outside [-1, 1]")

    def backward(g):
        return (-g / np.sqrt(1.0 - a.data * a.data),)

    return _node(np.arccos(a.data), (a,), backward, "arccos")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), backward, "softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) built from exp/sum/log with a constant max shift."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = sub(a, m)
    return add(log(tsum(exp(shifted), axis=axis)), np.squeeze(m, axis=axis))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        denom = np.expand_dims(out, axis)
        safe = np.where(denom > 0, denom, 1.0)
        unit = np.where(denom > 0, a.data / safe, 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return _node(out, (a,), backward, "norm")


def distance(a, b, axis: int = -1) -> Tensor:
    return norm(sub(a, b), axis=axis)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity in eval mode or when ``rate`` is 0; the mask
    is drawn from the supplied generator, never from global state."""
    a = as_tensor(a)
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# graph traversal

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Each node is visited once, in reverse topological order, so the
    accumulation order (and hence the floating-point result) is fixed by the
    graph structure alone.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


class Graph:
    """A named-input wrapper around a function built from tensor operations.

    >>> g = Graph(lambda x: (x * x).sum())
    >>> g.forward(x=np.array([3.0])).item()
    9.0
    >>> g.backward()["x"]
    array([6.])
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self._inputs: dict[str, Tensor] | None = None
        self._root: Tensor | None = None

    def forward(self, **inputs) -> Tensor:
        leaves = {}
        for name, value in inputs.items():
            if value is None:
                raise GraphError(f"input {name!r} is unbound")
            if isinstance(value, Tensor):
                leaves[name] = Tensor(value.data.copy(), requires_grad=value.requires_grad)
            else:
                leaves[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        try:
            root = self.fn(**leaves)
        except ShapeError as exc:
            raise ShapeError(f"forward failed: {exc}") from exc
        if not np.all(np.isfinite(root.data)):
            raise FloatingPointError("forward produced non-finite values")
        self._inputs, self._root = leaves, root
        return root

    def backward(self) -> dict[str, np.ndarray]:
        if self._root is None or self._inputs is None:
            raise GraphError("backward called before forward")
        if self._root.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self._root.shape}")
        for leaf in self._inputs.values():
            leaf.grad = None
        backward(self._root)
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in self._inputs.items()
            if leaf.requires_grad
        }


def leaves(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a mapping of arrays as gradient-tracking leaf tensors."""
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
