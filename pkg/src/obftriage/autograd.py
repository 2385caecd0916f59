"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each op returns a ``Tensor`` that remembers its parents and a closure that pushes the
output gradient back to them. ``Tensor.backward`` walks the graph in reverse topological
order. Layer norm, softmax and GELU are fused into single nodes with hand-derived
gradients to keep the graph small.
"""

from __future__ import annotations

import math

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=float) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        # never in place: ``g`` may be shared with other nodes or be a read-only view
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        a._accumulate(unbroadcast(g, a.shape))
        b._accumulate(unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, parents=(a, b), backward=back)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward=lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, parents=(a, b), backward=back)


def square(a: Tensor) -> Tensor:
    return Tensor(a.data * a.data, parents=(a,), backward=lambda g: a._accumulate(2.0 * a.data * g))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 2 and a.data.ndim > 2:
        return _matmul_flat(a, b)

    def back(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, parents=(a, b), backward=back)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, n) as a single 2-D product; the weight gradient is one GEMM too
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        if a.requires_grad:
            a._accumulate((g2 @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            b._accumulate(a2.T @ g2)

    return Tensor((a2 @ b.data).reshape(lead + (b.shape[1],)), parents=(a, b), backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), parents=(a,), backward=lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), parents=(a,),
                  backward=lambda g: a._accumulate(np.transpose(g, inv)))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def concat(parts: list[Tensor], axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            p._accumulate(gp)

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts), backward=back)


def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``weight[idx]``."""

    def back(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[-1]))
            weight._accumulate(gw)

    return Tensor(weight.data[idx], parents=(weight,), backward=back)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 (``idx`` must not repeat)."""

    def back(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        a._accumulate(ga)

    return Tensor(a.data[idx], parents=(a,), backward=back)


def scatter_rows(a: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``idx`` in an otherwise zero array of ``n_rows`` rows."""
    out = np.zeros((n_rows,) + a.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data
    return Tensor(out, parents=(a,), backward=lambda g: a._accumulate(g[idx]))


def where(cond: np.ndarray, a: Tensor, fill: float = 0.0) -> Tensor:
    """``a`` where ``cond`` holds, a constant elsewhere; no gradient flows to the filled slots."""
    cond = np.broadcast_to(cond, a.shape)
    return Tensor(np.where(cond, a.data, fill), parents=(a,),
                  backward=lambda g: a._accumulate(np.where(cond, g, 0.0)))


def softmax(x: Tensor, axis=-1, key_mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions with ``key_mask`` False get exactly zero weight."""
    z = x.data
    if key_mask is not None:
        z = np.where(key_mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor(y, parents=(x,), backward=back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    d = x.shape[-1]

    def back(g):
        gamma._accumulate(unbroadcast(g * xhat, gamma.shape))
        beta._accumulate(unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(rstd * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d))

    return Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta), backward=back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    u = x.data
    u2 = u * u
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u2))

    def back(g):
        du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u2)
        x._accumulate(g * du)

    return Tensor(0.5 * u * (1.0 + t), parents=(x,), backward=back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)
