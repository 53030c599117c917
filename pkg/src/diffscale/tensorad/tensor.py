"""Dense tensors with a recorded graph for reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
backward rule. :func:`backprop` walks the graph in reverse topological order
and accumulates adjoints into ``.grad`` of every tensor that requires them.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, UsageError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result; the backward rule is kept only if some parent needs gradients."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)


def topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root`` with every node after its parents."""
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients.

    Returns a mapping from leaf tensors to their gradients. Intermediate
    adjoints are released as soon as they have been propagated.
    """
    if loss.data.size != 1:
        raise UsageError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires gradients")
    order = topological_order(loss)
    adj = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"backward rule produced {pg.shape} for parent of shape {parent.shape}"
                )
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return leaves


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return make(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make(ad * ad, (a,), lambda g: (2 * g * ad,))


def total(a) -> Tensor:
    """Sum of all entries (f64 accumulation)."""
    a = as_tensor(a)
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return make(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    return make(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def bmm(a, b) -> Tensor:
    """Batched matrix product of ``(B, n, k)`` and ``(B, k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return make(ad @ bd, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (a,), backward)
