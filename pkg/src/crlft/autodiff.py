"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just the tensor operations the policy backends need, all in float64.
Build a graph with the functions below, call ``backward()`` on a scalar,
read gradients off the leaves. Gradient exactness is enforced against
central finite differences in the test suite.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph holding a float64 ndarray."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(a.value + b.value, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(a.value * b.value, (a, b), backward_fn)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accum(a, g * s)

    return _make(a.value * s, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product of an (..., K) tensor with a 2-D (K, N) weight."""
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")

    def backward_fn(g):
        _accum(a, g @ b.value.T)
        k, n = b.value.shape
        _accum(b, a.value.reshape(-1, k).T @ g.reshape(-1, n))

    return _make(a.value @ b.value, (a, b), backward_fn)


def bmm(a, b) -> Tensor:
    """Batched matrix product (B, T, K) @ (B, K, S) -> (B, T, S)."""
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        _accum(a, np.einsum("bts,bks->btk", g, b.value))
        _accum(b, np.einsum("btk,bts->bks", a.value, g))

    return _make(np.einsum("btk,bks->bts", a.value, b.value), (a, b), backward_fn)


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.value, -1, -2), (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    v = np.tanh(a.value)

    def backward_fn(g):
        _accum(a, g * (1.0 - v * v))

    return _make(v, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    v = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(v)

    def backward_fn(g):
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(v, (a,), backward_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        _accum(a, sm * (g - (g * sm).sum(axis=axis, keepdims=True)))

    return _make(sm, (a,), backward_fn)


def gather_rows(table, idx) -> Tensor:
    """table[idx] for an integer index array; backward scatter-adds."""
    table = as_tensor(table)
    idx = np.asarray(idx)

    def backward_fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, idx, g)

    return _make(table.value[idx], (table,), backward_fn)


def select(a, idx: tuple) -> Tensor:
    """Fancy indexing a[idx] with a tuple of integer index arrays."""
    a = as_tensor(a)

    def backward_fn(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.value)
            np.add.at(a.grad, idx, g)

    return _make(a.value[idx], (a,), backward_fn)


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        rev = np.flip(g, axis=axis)
        _accum(a, np.flip(np.cumsum(rev, axis=axis), axis=axis))

    return _make(np.cumsum(a.value, axis=axis), (a,), backward_fn)


def concat_last(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na = a.value.shape[-1]

    def backward_fn(g):
        _accum(a, g[..., :na])
        _accum(b, g[..., na:])

    return _make(np.concatenate([a.value, b.value], axis=-1), (a, b), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accum(a, g.reshape(a.value.shape))

    return _make(a.value.reshape(shape), (a,), backward_fn)


def tsum(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = as_tensor(a)

    def backward_fn(g):
        _accum(a, np.full(a.value.shape, float(g)))

    return _make(np.asarray(a.value.sum()), (a,), backward_fn)


def backward(loss: Tensor):
    """Reverse accumulation from a scalar loss into leaf gradients."""
    if loss.value.ndim != 0:
        raise ValueError("backward() expects a scalar tensor")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
