"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus a closure that routes upstream gradients to
its parents. Graphs are built per call and discarded; backward() runs an
iterative topological sweep from a scalar output. Ops preserve the dtype
of their inputs, so the same graph code runs in float32 or float64.

The model layer composes only the primitives exported here; every
primitive's gradient is checked against central finite differences in the
test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """Array node in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(leaf) into .grad for every reachable tensor."""
    if out.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {out.data.shape}")
    if not out.requires_grad:
        raise ValueError("output does not require grad")
    # iterative post-order topological sort
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** exponent

    def back(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(data, (a,), back)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def back(g):
        _accum(a, g * data)

    return _node(data, (a,), back)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def back(g):
        _accum(a, g / a.data)

    return _node(data, (a,), back)


def absolute(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.abs(a.data)

    def back(g):
        _accum(a, g * np.sign(a.data))

    return _node(data, (a,), back)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _node(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def back(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - data * data))

    return _node(data, (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU nonlinearity (tanh approximation); smooth everywhere."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * local)

    return _node(data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-dim broadcasting; operands >= 2D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have >= 2 dims")
    data = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), back)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accum(a, g.transpose(inv))

    return _node(data, (a,), back)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)

    return _node(data, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, gp in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, gp)

    return _node(data, tuple(tensors), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _node(data, (a,), back)


def _sparsemax_forward(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row (last axis) onto the simplex."""
    z_sorted = np.sort(z, axis=-1)[..., ::-1]
    k = np.arange(1, z.shape[-1] + 1, dtype=z.dtype)
    cssv = np.cumsum(z_sorted, axis=-1) - 1.0
    support = z_sorted * k > cssv
    k_support = support.sum(axis=-1, keepdims=True)
    idx = k_support - 1
    tau = np.take_along_axis(cssv, idx, axis=-1) / k_support.astype(z.dtype)
    return np.maximum(z - tau, 0.0).astype(z.dtype, copy=False)


def sparsemax(a: Tensor, axis: int = -1) -> Tensor:
    """Sparse simplex projection (sparsemax) along axis."""
    a = _as_tensor(a)
    moved = np.moveaxis(a.data, axis, -1)
    p = _sparsemax_forward(moved)
    data = np.moveaxis(p, -1, axis)

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        support = p > 0
        k = support.sum(axis=-1, keepdims=True)
        mean_g = np.where(support, gm, 0.0).sum(axis=-1, keepdims=True) / k
        gx = np.where(support, gm - mean_g, 0.0)
        _accum(a, np.moveaxis(gx, -1, axis).astype(a.data.dtype, copy=False))

    return _node(data, (a,), back)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)
    return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)


def _col2im(gcols: np.ndarray, xshape: tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int) -> np.ndarray:
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g6 = gcols.reshape(n, ho, wo, c, kh, kw)
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + w]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution (cross-correlation), NCHW layout, via im2col."""
    x, w = _as_tensor(x), _as_tensor(w)
    n, c, h, wdt = x.data.shape
    f, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input {c}, kernel {c2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("kernel larger than padded input")
    cols = _im2col(x.data, kh, kw, stride, padding)  # (n, ho*wo, c*kh*kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T  # (n, ho*wo, f)
    if b is not None:
        out = out + b.data
    data = out.transpose(0, 2, 1).reshape(n, f, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(n, f, ho * wo).transpose(0, 2, 1)  # (n, ho*wo, f)
        _accum(w, np.matmul(g2.transpose(0, 2, 1), cols).sum(axis=0).reshape(w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gcols = np.matmul(g2, wmat)  # (n, ho*wo, c*kh*kw)
        _accum(x, _col2im(gcols, x.data.shape, kh, kw, stride, padding))

    return _node(data, parents, back)


# ---------------------------------------------------------------------------
# composed layers (built from primitives; gradients fall out of the graph)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = add(x, mul(mu, -1.0))
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: split last axis in half, value * sigmoid(gate)."""
    half = x.data.shape[-1] // 2
    if x.data.shape[-1] != 2 * half:
        raise ValueError("glu needs an even last axis")
    value, gate = split_half(x)
    return mul(value, sigmoid(gate))


def split_half(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split the last axis into two equal halves."""
    x = _as_tensor(x)
    half = x.data.shape[-1] // 2
    first = x.data[..., :half]
    second = x.data[..., half:]

    def back_first(g):
        gz = np.zeros_like(x.data)
        gz[..., :half] = g
        _accum(x, gz)

    def back_second(g):
        gz = np.zeros_like(x.data)
        gz[..., half:] = g
        _accum(x, gz)

    return _node(first, (x,), back_first), _node(second, (x,), back_second)
