"""Reverse-mode autodiff over numpy arrays.

Small closed set of primitives, each with a hand-written vector-Jacobian
product.  Gradients flow only into subgraphs that contain a parameter, so
constant inputs cost nothing on the backward pass.  Dtype follows the
inputs: float32 for training, float64 for finite-difference checks.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("data", "grad", "parents", "vjp", "req", "_grad_owned")

    def __init__(self, data: np.ndarray, parents: tuple = (), vjp=None,
                 requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.vjp = vjp  # callable(out_grad) -> tuple of per-parent grads
        self.req = requires_grad or any(p.req for p in parents)
        self._grad_owned = False  # grad buffer may be shared until first +=

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def const(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.req else None,
                _unbroadcast(g, b.shape) if b.req else None)
    return Tensor(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.req else None,
                _unbroadcast(-g, b.shape) if b.req else None)
    return Tensor(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.req else None,
                _unbroadcast(g * a.data, b.shape) if b.req else None)
    return Tensor(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)  # a numpy float64 scalar would promote the graph

    def vjp(g):
        return (g * c,)
    return Tensor(a.data * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        ga = gb = None
        if a.req:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.req:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return Tensor(a.data @ b.data, (a, b), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)
    return Tensor(a.data.reshape(shape), (a,), vjp)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def vjp(g):
        return (np.swapaxes(g, i, j),)
    return Tensor(np.swapaxes(a.data, i, j), (a,), vjp)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.req:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                outs.append(g[tuple(idx)])
            else:
                outs.append(None)
        return tuple(outs)
    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)
    return Tensor(a.data[idx], (a,), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup, e.g. token embeddings: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)

    def vjp(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1),
                  g.reshape(-1, table.shape[-1]))
        return (gt,)
    return Tensor(table.data[ids], (table,), vjp)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D input; used by the token loss."""
    rows = np.arange(a.shape[0])
    idx = np.asarray(idx)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(ga, (rows, idx), g)
        return (ga,)
    return Tensor(a.data[rows, idx], (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)
    return Tensor(y, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return Tensor(out, (a,), vjp)


_LN_EPS = 1e-5


def layernorm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        ga = gg = gb = None
        if a.req:
            gx = g * gain.data
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        if gain.req:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.req:
            gb = _unbroadcast(g, bias.shape)
        return ga, gg, gb
    return Tensor(out, (a, gain, bias), vjp)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x  # x ** 3 would hit the scalar pow path, which is ~50x slower
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)
    return Tensor(out, (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def vjp(g):
        return (np.full(a.shape, float(g) / n, dtype=a.data.dtype),)
    return Tensor(np.asarray(a.data.mean()), (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(a.shape, float(g), dtype=a.data.dtype),)
    return Tensor(np.asarray(a.data.sum()), (a,), vjp)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable parameter."""
    if loss.data.ndim != 0:
        raise ValueError("backward needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.req:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is None or not parent.req:
                continue
            if parent.grad is None:
                # a vjp may hand the same buffer to several parents, so the
                # first contribution is only adopted, not owned
                parent.grad = g
                parent._grad_owned = False
            elif parent._grad_owned:
                parent.grad += g
            else:
                parent.grad = parent.grad + g
                parent._grad_owned = True
