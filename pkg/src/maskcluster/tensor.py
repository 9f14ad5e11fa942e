"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything runs in float64 by default (float32 arrays are passed through
untouched so the benchmark can opt into single precision). The graph is
one-shot: call backward() once on a scalar, read .grad off the leaves, and
let the graph go out of scope.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.float32:
        return data
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array plus an optional gradient record in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward=None):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        # Drop graph edges eagerly when nothing upstream needs gradients.
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias an upstream gradient buffer
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


# -- arithmetic ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def bwd(g):
        _accum(a, g * s)

    return Tensor(a.data * s, parents=(a,), backward=bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def absolute(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return Tensor(np.abs(a.data), parents=(a,), backward=bwd)


def log(a) -> Tensor:
    """Natural log with the input floored at LOG_FLOOR (keeps CE finite)."""
    a = _wrap(a)
    clamped = np.maximum(a.data, LOG_FLOOR)

    def bwd(g):
        _accum(a, g / clamped)

    return Tensor(np.log(clamped), parents=(a,), backward=bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def gelu(a) -> Tensor:
    """GeLU, tanh approximation (closed-form derivative)."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * local)

    return Tensor(0.5 * x * (1.0 + t), parents=(a,), backward=bwd)


# -- reductions & shape ops --------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, parents=(a,), backward=bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape) / count)

    return Tensor(out_data, parents=(a,), backward=bwd)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return Tensor(np.transpose(a.data, axes), parents=(a,), backward=bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.shape

    def bwd(g):
        _accum(a, g.reshape(orig))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    axis_ = axis % parts[0].ndim
    sizes = [p.shape[axis_] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out_data = np.concatenate([p.data for p in parts], axis=axis_)

    def bwd(g):
        for p, chunk in zip(parts, np.split(g, splits, axis=axis_)):
            _accum(p, chunk)

    return Tensor(out_data, parents=tuple(parts), backward=bwd)


def gather_rows(a, idx, axis: int = -2) -> Tensor:
    """Select rows of `a` along `axis` by integer index list."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    axis_ = axis % a.ndim
    n = a.shape[axis_]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for extent {n}")

    def bwd(g):
        if not a.requires_grad:
            return
        gz = np.zeros_like(a.data)
        np.add.at(np.moveaxis(gz, axis_, 0), idx, np.moveaxis(g, axis_, 0))
        _accum(a, gz)

    return Tensor(np.take(a.data, idx, axis=axis_), parents=(a,), backward=bwd)


def scatter_rows(a, idx, n_total: Optional[int] = None, axis: int = -2) -> Tensor:
    """Place rows of `a` at positions `idx` of a zero tensor with extent
    `n_total` along `axis`. Inverse of gather_rows for permutation indices."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    axis_ = axis % a.ndim
    if n_total is None:
        n_total = a.shape[axis_]
    if idx.size != a.shape[axis_]:
        raise IndexError(
            f"scatter_rows: {idx.size} indices for {a.shape[axis_]} rows")
    if len(np.unique(idx)) != idx.size:
        raise IndexError("scatter_rows indices must be unique")
    if idx.size and (idx.min() < 0 or idx.max() >= n_total):
        raise IndexError(f"scatter_rows index out of range for extent {n_total}")
    out_shape = list(a.shape)
    out_shape[axis_] = n_total
    out_data = np.zeros(out_shape, dtype=a.data.dtype)
    np.moveaxis(out_data, axis_, 0)[idx] = np.moveaxis(a.data, axis_, 0)

    def bwd(g):
        _accum(a, np.moveaxis(np.moveaxis(g, axis_, 0)[idx], 0, axis_))

    return Tensor(out_data, parents=(a,), backward=bwd)


def _expand_index(idx: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    """(B, n_sel) int index -> shape broadcastable for take/put_along_axis
    on an (B, ..., n, ...) array with the selection on `axis`."""
    shape = [idx.shape[0]] + [1] * (ndim - 1)
    shape[axis] = idx.shape[1]
    return idx.reshape(shape)


def gather_rows_batched(a, idx: np.ndarray, axis: int = -2) -> Tensor:
    """Per-sample row selection: idx has shape (B, n_sel), one index list
    per leading-batch element of `a`."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    axis_ = axis % a.ndim
    n = a.shape[axis_]
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise IndexError(
            f"batched index shape {idx.shape} does not match batch {a.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows_batched index out of range for extent {n}")
    if idx.shape[1] > 1 and (np.diff(np.sort(idx, axis=1), axis=1) == 0).any():
        raise IndexError("gather_rows_batched indices must be unique per sample")
    ix = _expand_index(idx, a.ndim, axis_)
    out_data = np.take_along_axis(a.data, ix, axis=axis_)

    def bwd(g):
        if not a.requires_grad:
            return
        gz = np.zeros_like(a.data)
        # per-sample indices are unique, so a plain put accumulates correctly
        np.put_along_axis(gz, np.broadcast_to(ix, g.shape), g, axis=axis_)
        _accum(a, gz)

    return Tensor(out_data, parents=(a,), backward=bwd)


def scatter_rows_batched(a, idx: np.ndarray, n_total: int,
                         axis: int = -2) -> Tensor:
    """Per-sample inverse of gather_rows_batched: rows of `a` land at
    positions idx[b] of a zero tensor with extent n_total along `axis`."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    axis_ = axis % a.ndim
    if idx.ndim != 2 or idx.shape[0] != a.shape[0] or idx.shape[1] != a.shape[axis_]:
        raise IndexError(
            f"batched index shape {idx.shape} does not match rows "
            f"{a.shape[axis_]} of batch {a.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_total):
        raise IndexError(
            f"scatter_rows_batched index out of range for extent {n_total}")
    if idx.shape[1] > 1 and (np.diff(np.sort(idx, axis=1), axis=1) == 0).any():
        raise IndexError("scatter_rows_batched indices must be unique per sample")
    out_shape = list(a.shape)
    out_shape[axis_] = n_total
    ix = _expand_index(idx, a.ndim, axis_)
    out_data = np.zeros(out_shape, dtype=a.data.dtype)
    np.put_along_axis(out_data, np.broadcast_to(ix, a.shape), a.data, axis=axis_)

    def bwd(g):
        _accum(a, np.take_along_axis(g, ix, axis=axis_))

    return Tensor(out_data, parents=(a,), backward=bwd)


# -- neural-net primitives ---------------------------------------------

def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = _wrap(a)
    z = (a.data - a.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot) / temperature)

    return Tensor(y, parents=(a,), backward=bwd)


def layer_norm(a, gain, bias, eps: float = 1e-8) -> Tensor:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(a, (dxhat - m1 - xhat * m2) * inv)
        red = tuple(range(g.ndim - 1))
        _accum(gain, _unbroadcast((g * xhat).sum(axis=red), gain.shape))
        _accum(bias, _unbroadcast(g.sum(axis=red), bias.shape))

    return Tensor(out_data, parents=(a, gain, bias), backward=bwd)


def transposed_conv2d(a, kernel, stride: int) -> Tensor:
    """Fractionally-strided conv with kernel size equal to the stride, so
    each input cell expands into a disjoint stride x stride output block."""
    a, kernel = _wrap(a), _wrap(kernel)
    if a.ndim != 4 or kernel.ndim != 4:
        raise ValueError("transposed_conv2d expects 4-D input and kernel")
    c_in, c_out, kh, kw = kernel.shape
    if kh != stride or kw != stride:
        raise ValueError(
            f"kernel {kh}x{kw} must equal stride {stride} to recover the "
            f"target resolution exactly")
    if a.shape[1] != c_in:
        raise ShapeMismatchError(
            f"input channels {a.shape[1]} != kernel in-channels {c_in}")
    b_, _, h, w = a.shape
    out6 = np.einsum("bchw,cokl->bohkwl", a.data, kernel.data)
    out_data = out6.reshape(b_, c_out, h * stride, w * stride)

    def bwd(g):
        g6 = g.reshape(b_, c_out, h, stride, w, stride)
        _accum(a, np.einsum("bohkwl,cokl->bchw", g6, kernel.data))
        _accum(kernel, np.einsum("bchw,bohkwl->cokl", a.data, g6))

    return Tensor(out_data, parents=(a, kernel), backward=bwd)
