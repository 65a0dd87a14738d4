"""Minimal reverse-mode differentiation over numpy arrays.

Only the operators the denoiser needs are provided. Feature maps are NCHW.
Each op records its parents and a closure that pushes the output gradient
back; :meth:`Tensor.backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class OpCounter:
    """Counts multiply-accumulates and element-wise products while active."""

    active = None

    def __init__(self):
        self.macs = 0
        self.elementwise = 0

    @property
    def flops(self):
        return 2 * self.macs + self.elementwise

    def __enter__(self):
        self._outer, OpCounter.active = OpCounter.active, self
        return self

    def __exit__(self, *exc):
        OpCounter.active = self._outer


def _count(macs=0, elementwise=0):
    if OpCounter.active is not None:
        OpCounter.active.macs += int(macs)
        OpCounter.active.elementwise += int(elementwise)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = data
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data) if grad is None else grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))
    _count(elementwise=out.data.size)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def scale(a, c: float):
    a = as_tensor(a)
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: a._accumulate(g * c)
    return out


def silu(a):
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, (a,))
    out._backward = lambda g: a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,))
    out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), (a,))
    out._backward = lambda g: a._accumulate(g.transpose(inverse))
    return out


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))

    def backward(g):
        for t, piece in zip(tensors, np.split(g, np.cumsum(sizes)[:-1], axis=axis)):
            t._accumulate(piece)

    out._backward = backward
    return out


def linear(x, weight, bias=None):
    """x (N, Cin) @ weight.T (Cout, Cin) + bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    y = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
        parents = parents + (bias,)
    out = Tensor(y, parents)

    def backward(g):
        x._accumulate(g @ weight.data)
        weight._accumulate(g.T @ x.data)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    out._backward = backward
    return out


def pointwise(x, weight, bias=None):
    """1x1 convolution on NCHW: weight (Cout, Cin), bias (Cout,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    y = np.einsum("oc,nchw->nohw", weight.data, x.data, optimize=True)
    _count(macs=weight.data.size * x.data.size // x.shape[1])
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[None, :, None, None]
        parents = parents + (bias,)
    out = Tensor(y, parents)

    def backward(g):
        x._accumulate(np.einsum("oc,nohw->nchw", weight.data, g, optimize=True))
        weight._accumulate(np.einsum("nohw,nchw->oc", g, x.data, optimize=True))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = backward
    return out


def _windows3x3(x):
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)


def _correlate3x3(x, weight):
    return np.einsum("nchwij,ocij->nohw", _windows3x3(x), weight, optimize=True)


def conv3x3(x, weight, bias=None):
    """Same-size 3x3 cross-correlation with zero padding; weight (Cout, Cin, 3, 3)."""
    x, weight = as_tensor(x), as_tensor(weight)
    y = _correlate3x3(x.data, weight.data)
    _count(macs=weight.data.size * x.data.size // x.shape[1])
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[None, :, None, None]
        parents = parents + (bias,)
    out = Tensor(y, parents)

    def backward(g):
        flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        x._accumulate(_correlate3x3(g, flipped))
        weight._accumulate(np.einsum("nohw,nchwij->ocij", g, _windows3x3(x.data), optimize=True))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = backward
    return out


def group_norm(x, groups, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.shape
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=2, keepdims=True) + eps)
    xhat = (centered * inv_std).reshape(n, c, h, w)
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = Tensor(y, (x, gamma, beta))

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        gx = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv_std * (gx - gx.mean(axis=2, keepdims=True) - xh * (gx * xh).mean(axis=2, keepdims=True))
        x._accumulate(dx.reshape(n, c, h, w))

    out._backward = backward
    return out


def avg_pool2(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y, (x,))

    def backward(g):
        x._accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    out._backward = backward
    return out


def upsample2(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,))
    out._backward = lambda g: x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return out


def attention(q, k, v):
    """Single-head scaled dot-product attention on (N, L, C) / (N, S, C)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale_factor = 1.0 / np.sqrt(q.shape[-1])
    logits = np.einsum("nlc,nsc->nls", q.data, k.data) * scale_factor
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = Tensor(np.einsum("nls,nsc->nlc", weights, v.data), (q, k, v))

    def backward(g):
        v._accumulate(np.einsum("nls,nlc->nsc", weights, g))
        dw = np.einsum("nlc,nsc->nls", g, v.data)
        dlogits = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True)) * scale_factor
        q._accumulate(np.einsum("nls,nsc->nlc", dlogits, k.data))
        k._accumulate(np.einsum("nls,nlc->nsc", dlogits, q.data))

    out._backward = backward
    return out


def mse_sum(pred, target):
    """Per-sample squared L2 error averaged over the batch (a scalar)."""
    pred = as_tensor(pred)
    diff = pred.data - target
    n = diff.shape[0]
    out = Tensor(np.asarray(np.sum(diff**2) / n), (pred,))
    out._backward = lambda g: pred._accumulate(g * 2.0 * diff / n)
    return out
