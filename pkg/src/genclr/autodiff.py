"""Reverse-mode automatic differentiation over dense numpy arrays.

Everything trainable in this package (encoder, generators, discriminator,
the differentiable view transforms and every loss) is composed from the
primitives in this module. Each primitive records a backward closure on the
output tensor; ``Tensor.backward()`` replays the recorded graph once in
reverse topological order and accumulates gradients into ``.grad``.

Training runs at float32; verification (finite-difference checks, loss
oracles) runs the same code at float64.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen models)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus the bookkeeping needed for reverse mode.

    ``data`` is always a numpy array (float32 or float64). ``grad`` is filled
    by ``backward()`` and is None for tensors that were never reached, which
    callers must read as an exact zero gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return _unary(self, self.data.astype(dtype),
                      lambda g: g.astype(self.data.dtype))

    def zero_grad(self):
        self.grad = None

    def grad_array(self) -> np.ndarray:
        """The accumulated gradient; exact zeros when not on any path."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad}{tag})"

    # -- autodiff ------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate dself/dparam into ``.grad`` of every reachable tensor.

        Iterative topological order; each recorded node's closure runs
        exactly once.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        self.grad = np.array(grad, dtype=self.data.dtype)

        order = _toposort(self)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._backward is not None:
                # Interior activations: release once consumed.
                node.grad = None

    # -- operator sugar (delegates to primitives below) ------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(constant_like(other, self), self)

    def __neg__(self):
        return negate(self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(constant_like(other, self), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and
                       isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
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
            stack.append((p, False))
    return list(reversed(order))


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        # Views must be materialized: later += into a stored view would
        # corrupt whatever buffer it aliases.
        t.grad = g.copy() if (g.base is not None or not g.flags.writeable) else g
    else:
        t.grad += g


def _needs_graph(*ts) -> bool:
    return _grad_enabled and any(t.requires_grad for t in ts)


def _make(out_data, parents, backward) -> Tensor:
    out = Tensor(out_data)
    if _needs_graph(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unary(x: Tensor, out_data, grad_fn) -> Tensor:
    def backward(g):
        if x.requires_grad:
            _accumulate(x, grad_fn(g))
    return _make(out_data, (x,), backward)


def _as_tensor(x, ref: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.dtype if ref is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

_PRIMITIVES: list[str] = []


def _primitive(fn):
    _PRIMITIVES.append(fn.__name__)
    return fn


def primitive_set() -> tuple[str, ...]:
    """Names of every differentiable primitive this module provides."""
    return tuple(_PRIMITIVES)


# ---------------------------------------------------------------------------
# broadcasting elementwise arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} "
                         f"are not broadcast-compatible") from None


@_primitive
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            _accumulate(a, ga)
            # Never hand the same buffer to both parents.
            if b.requires_grad and a.grad is g:
                _accumulate(b, _unbroadcast(g.copy(), b.shape))
                return
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), backward)


@_primitive
def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the channel axis (last axis for 2-D inputs,
    axis 1 for NCHW)."""
    if x.ndim == 2:
        if b.shape != (x.shape[1],):
            raise ShapeError(f"bias_add: bias {b.shape} does not match "
                             f"feature axis of {x.shape}")
        return add(x, b)
    if x.ndim == 4:
        if b.shape != (x.shape[1],):
            raise ShapeError(f"bias_add: bias {b.shape} does not match "
                             f"channel axis of {x.shape}")
        return add(x, reshape(b, (1, -1, 1, 1)))
    raise ShapeError(f"bias_add: unsupported input rank {x.ndim}")


@_primitive
def subtract(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "subtract")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), backward)


@_primitive
def multiply(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "multiply")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), backward)


@_primitive
def divide(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "divide")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), backward)


@_primitive
def negate(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: -g)


@_primitive
def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _unary(x, out_data, lambda g: g * out_data)


@_primitive
def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda g: g / x.data)


@_primitive
def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)
    return _unary(x, out_data, lambda g: g * (0.5 / out_data))


@_primitive
def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    return _unary(x, out_data, lambda g: g * (1.0 - out_data * out_data))


@_primitive
def relu(x: Tensor) -> Tensor:
    # Derivative at 0 is the right derivative (1), so the mask is x >= 0.
    mask = x.data >= 0
    return _unary(x, np.maximum(x.data, 0.0), lambda g: g * mask)


@_primitive
def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    mask = x.data >= 0
    scale = np.where(mask, 1.0, alpha).astype(x.dtype)
    return _unary(x, x.data * scale, lambda g: g * scale)


@_primitive
def sigmoid(x: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-x.data))
    return _unary(x, out_data, lambda g: g * out_data * (1.0 - out_data))


@_primitive
def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), computed without overflow for large |x|.
    out_data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _unary(x, out_data.astype(x.dtype), lambda g: g * sig)


@_primitive
def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 on the closed interval, 0 outside."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda g: g * mask)


# ---------------------------------------------------------------------------
# matmul and reductions
# ---------------------------------------------------------------------------

@_primitive
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy matmul semantics: 2-D matrices or stacked batches thereof."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, "
                         f"got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))
    return _make(np.matmul(a.data, b.data), (a, b), backward)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes):
    """Reshape a reduced gradient so it broadcasts back over `shape`."""
    full = [1 if i in axes else s for i, s in enumerate(shape)]
    return g.reshape(full)


@_primitive
def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    out_data = x.data.sum(axis=axes if axis is not None else None, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g if keepdims or x.ndim == 0 else _expand_reduced(g, x.shape, axes)
            _accumulate(x, np.broadcast_to(gg, x.shape).astype(x.dtype).copy())
    return _make(out_data, (x,), backward)


@_primitive
def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = x.data.mean(axis=axes if axis is not None else None, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g if keepdims or x.ndim == 0 else _expand_reduced(g, x.shape, axes)
            _accumulate(x, (np.broadcast_to(gg, x.shape) / count).astype(x.dtype))
    return _make(out_data, (x,), backward)


@_primitive
def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along one axis, stabilized by the row maximum."""
    ax = axis % x.ndim
    m = x.data.max(axis=ax, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out_data = m + np.log(total)
    softmax = shifted / total
    if not keepdims:
        out_data = np.squeeze(out_data, axis=ax)

    def backward(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, ax)
            _accumulate(x, (gg * softmax).astype(x.dtype))
    return _make(out_data, (x,), backward)


@_primitive
def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit Euclidean norm along `axis`."""
    ax = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    denom = np.maximum(norm, eps)
    out_data = x.data / denom

    def backward(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=ax, keepdims=True)
            _accumulate(x, ((g - out_data * dot) / denom).astype(x.dtype))
    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

@_primitive
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(x.shape))


@_primitive
def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _unary(x, x.data.transpose(axes), lambda g: g.transpose(inverse))


@_primitive
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


@_primitive
def index_rows(x: Tensor, idx) -> Tensor:
    """Gather rows along axis 0; rows may repeat (backward scatter-adds)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)
    return _make(x.data[idx], (x,), backward)


@_primitive
def take_flat(x: Tensor, idx, out_shape=None) -> Tensor:
    """Gather entries of x by flat index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = x.data.reshape(-1)[idx]
    if out_shape is not None:
        out_data = out_data.reshape(out_shape)

    def backward(g):
        if x.requires_grad:
            flat = np.bincount(idx.reshape(-1), weights=g.reshape(-1).astype(np.float64),
                               minlength=x.size)
            _accumulate(x, flat.astype(x.dtype).reshape(x.shape))
    return _make(out_data, (x,), backward)


@_primitive
def flip_lr(x: Tensor, flags) -> Tensor:
    """Mirror selected images of an NCHW batch along the width axis."""
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (x.shape[0],):
        raise ShapeError(f"flip_lr: flags {flags.shape} do not match batch "
                         f"axis of {x.shape}")
    out_data = x.data.copy()
    out_data[flags] = out_data[flags][..., ::-1]

    def backward(g):
        if x.requires_grad:
            gx = g.copy()
            gx[flags] = gx[flags][..., ::-1]
            _accumulate(x, gx)
    return _make(out_data, (x,), backward)


@_primitive
def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor,
                     mu: np.ndarray, var: np.ndarray,
                     eps: float = 1e-5) -> Tensor:
    """Fused training-mode batch normalization over (B,) or (B, H, W).

    `mu`/`var` must be the batch statistics of x over those axes (the caller
    computes them once and also feeds its running buffers); the backward
    pass differentiates through them as functions of x.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm_train: scale {gamma.shape} / shift "
                         f"{beta.shape} do not match channel axis of {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    count = 1
    for a in axes:
        count *= x.shape[a]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv
    gd = gamma.data.reshape(bshape)
    out_data = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.sum(axis=axes, keepdims=True) / count
            m2 = (dxhat * xhat).sum(axis=axes, keepdims=True) / count
            _accumulate(x, (inv * (dxhat - m1 - xhat * m2)).astype(x.dtype))
    return _make(out_data, (x, gamma, beta), backward)


@_primitive
def channel_scale_shift(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine y = x * gamma + beta for (B, C) or (B, C, H, W)."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel_scale_shift: scale {gamma.shape} / shift "
                         f"{beta.shape} do not match channel axis of {x.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)

    def backward(g):
        red = (0,) + tuple(range(2, x.ndim))
        if x.requires_grad:
            _accumulate(x, g * gd)
        if gamma.requires_grad:
            _accumulate(gamma, (g * x.data).sum(axis=red))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=red))
    return _make(x.data * gd + beta.data.reshape(bshape), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# 2D convolution family (NCHW, OIHW weights)
# ---------------------------------------------------------------------------

def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


try:  # compiled patch kernels; the numpy fallback below is equivalent
    from numba import njit as _njit

    @_njit(cache=True)
    def _im2col_kernel(x, cols, kh, kw, stride):
        b, c, hp, wp = x.shape
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        for n in range(b):
            for i in range(oh):
                for j in range(ow):
                    idx = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                cols[n, i, j, idx] = x[n, ch, i * stride + p,
                                                       j * stride + q]
                                idx += 1

    @_njit(cache=True)
    def _col2im_kernel(cols, buf, kh, kw, stride):
        b, oh, ow, ckk = cols.shape
        c = ckk // (kh * kw)
        for n in range(b):
            for i in range(oh):
                for j in range(ow):
                    idx = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                buf[n, ch, i * stride + p, j * stride + q] += \
                                    cols[n, i, j, idx]
                                idx += 1

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(B,C,H,W) -> (B, OH, OW, C*kh*kw) patch matrix."""
    b, c, h, w = x.shape
    if padding:
        x = _pad_hw(x, padding)
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if _HAVE_NUMBA:
        x = np.ascontiguousarray(x)
        cols = np.empty((b, oh, ow, c * kh * kw), dtype=x.dtype)
        _im2col_kernel(x, cols, kh, kw, stride)
        return cols, oh, ow
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, oh, ow, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    # (B, OH, OW, C, kh, kw) contiguous copy for the GEMM
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int):
    """Scatter-add (B, OH, OW, C*kh*kw) patches back to (B,C,H,W)."""
    b, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    buf = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    if _HAVE_NUMBA:
        _col2im_kernel(np.ascontiguousarray(cols.reshape(b, oh, ow, -1)),
                       buf, kh, kw, stride)
    else:
        patches = np.ascontiguousarray(
            cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
        for i in range(kh):
            for j in range(kw):
                buf[:, :, i:i + stride * oh:stride,
                    j:j + stride * ow:stride] += patches[:, :, i, j]
    if padding:
        buf = buf[:, :, padding:hp - padding, padding:wp - padding]
    return buf


def _conv_out_size(h, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1


@_primitive
def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; x (B,C,H,W), w (F,C,KH,KW)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match "
                         f"weight {w.shape}")
    f, c, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(f, c * kh * kw)
    out_data = (cols.reshape(-1, c * kh * kw) @ wmat.T).reshape(x.shape[0], oh, ow, f)
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        if w.requires_grad:
            gw = gmat.T @ cols.reshape(-1, c * kh * kw)
            _accumulate(w, gw.reshape(w.shape))
        if x.requires_grad:
            gcols = gmat @ wmat
            _accumulate(x, _col2im(gcols.reshape(x.shape[0], oh, ow, -1),
                                   x.shape, kh, kw, stride, padding))
    return _make(out_data, (x, w), backward)


@_primitive
def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d's forward map).

    x (B,C,H,W), w (C,F,KH,KW); output (B, F, (H-1)*stride - 2*padding + KH, ...).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-D input and weight, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_transpose: input channels {x.shape} do not "
                         f"match weight {w.shape}")
    b, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    # cols[b, i, j, f*kh*kw] = x[b, :, i, j] · w[:, f, p, q]; col2im scatters
    # them onto the (padded) output grid, which is exactly the adjoint map.
    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, c)
    wmat = w.data.reshape(c, f * kh * kw)
    cols = (xmat @ wmat).reshape(b, h, wd, f * kh * kw)
    out_data = _col2im(cols, (b, f, oh, ow), kh, kw, stride, padding)

    def backward(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, padding)
        gmat = gcols.reshape(-1, f * kh * kw)
        if x.requires_grad:
            gx = (gmat @ wmat.T).reshape(b, goh, gow, c).transpose(0, 3, 1, 2)
            _accumulate(x, np.ascontiguousarray(gx))
        if w.requires_grad:
            gw = xmat.T @ gmat
            _accumulate(w, gw.reshape(w.shape))
    return _make(out_data, (x, w), backward)


# ---------------------------------------------------------------------------
# bilinear crop-and-resize
# ---------------------------------------------------------------------------

def _bilinear_weights(starts, lengths, in_size, out_size, dtype):
    """(B, out_size, in_size) interpolation matrices for per-image crops.

    Source coordinate of output cell i is start + (i+0.5)*length/out - 0.5,
    clamped to the valid range (crop boxes are constrained inside the image,
    so clamping only guards rounding at the borders).
    """
    b = len(starts)
    i = np.arange(out_size, dtype=np.float64)
    coords = np.asarray(starts, dtype=np.float64)[:, None] + \
        (i[None, :] + 0.5) * (np.asarray(lengths, dtype=np.float64)[:, None] / out_size) - 0.5
    coords = np.clip(coords, 0.0, in_size - 1.0)
    lo = np.floor(coords).astype(np.intp)
    lo = np.minimum(lo, in_size - 2) if in_size > 1 else lo
    frac = coords - lo
    wmat = np.zeros((b, out_size, in_size), dtype=dtype)
    rows = np.repeat(np.arange(b), out_size)
    cols_i = np.tile(np.arange(out_size), b)
    wmat[rows, cols_i, lo.reshape(-1)] += (1.0 - frac).reshape(-1)
    wmat[rows, cols_i, np.minimum(lo + 1, in_size - 1).reshape(-1)] += frac.reshape(-1)
    return wmat


@_primitive
def bilinear_resample(x: Tensor, boxes, out_h: int, out_w: int) -> Tensor:
    """Crop an axis-aligned sub-rectangle per image and resize bilinearly.

    boxes is (B, 4) float (top, left, height, width) in source pixels; the
    box must lie inside the image. Differentiable w.r.t. the input pixels
    (the boxes are fixed transform parameters).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resample: expected NCHW input, got {x.shape}")
    if boxes.shape != (x.shape[0], 4):
        raise ShapeError(f"bilinear_resample: boxes {boxes.shape} do not match "
                         f"batch axis of {x.shape}")
    b, c, h, w = x.shape
    top, left, bh, bw = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    if np.any(bh < 1) or np.any(bw < 1) or np.any(top < 0) or np.any(left < 0) \
            or np.any(top + bh > h) or np.any(left + bw > w):
        raise ValueError("bilinear_resample: crop box outside the image")
    wy = _bilinear_weights(top, bh, h, out_h, x.dtype)     # (B, oh, H)
    wx = _bilinear_weights(left, bw, w, out_w, x.dtype)    # (B, ow, W)
    wyn = wy[:, None]                                      # (B, 1, oh, H)
    wxt = np.swapaxes(wx, 1, 2)[:, None]                   # (B, 1, W, ow)
    out_data = np.matmul(np.matmul(wyn, x.data), wxt)

    def backward(g):
        if x.requires_grad:
            gx = np.matmul(np.matmul(np.swapaxes(wyn, 2, 3), g),
                           np.swapaxes(wxt, 2, 3))
            _accumulate(x, gx.astype(x.dtype))
    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    checks: list[ParamCheck] = field(default_factory=list)
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def __str__(self):
        if self.failure:
            return f"grad_check FAILED: {self.failure}"
        lines = [f"  {c.name}: max_rel={c.max_rel_err:.3e} "
                 f"{'ok' if c.passed else 'FAIL'}" for c in self.checks]
        return "grad_check {}\n{}".format("passed" if self.passed else "FAILED",
                                          "\n".join(lines))


def grad_check(fn, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare fn's analytic gradients against central finite differences.

    fn is a zero-argument callable returning a scalar Tensor computed from
    `params` (a sequence of Tensors, perturbed in place). Run at float64;
    the relative error per entry is |a-n| / max(|a|, |n|, 1e-3) and the
    check passes iff the maximum over all entries is <= tol.
    """
    report = GradCheckReport()
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters "
                             f"(got {p.data.dtype} for {p.name or 'param'})")
        p.zero_grad()
    out = fn()
    if out.size != 1:
        report.failure = "fn must return a scalar"
        return report
    if not np.isfinite(out.item()):
        report.failure = f"non-finite base value {out.item()}"
        return report
    out.backward()
    analytic = [p.grad_array().copy() for p in params]
    for p in params:
        p.zero_grad()

    for k, (p, a) in enumerate(zip(params, analytic)):
        name = p.name or f"param{k}"
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = fn().item()
            flat[i] = orig - h
            with no_grad():
                fm = fn().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.failure = (f"non-finite value while probing {name}"
                                  f"[{np.unravel_index(i, p.shape)}]")
                return report
            nflat[i] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-3)
        rel = np.abs(a - numeric) / denom
        worst = int(np.argmax(rel)) if rel.size else 0
        report.checks.append(ParamCheck(
            name=name,
            max_rel_err=float(rel.reshape(-1)[worst]) if rel.size else 0.0,
            max_abs_err=float(np.max(np.abs(a - numeric))) if rel.size else 0.0,
            worst_index=np.unravel_index(worst, p.shape) if rel.size else (),
            passed=bool(rel.size == 0 or rel.reshape(-1)[worst] <= tol)))
    return report


REQUIRED_PRIMITIVES = (
    "matmul", "bias_add", "add", "multiply", "subtract", "negate", "exp",
    "log", "tanh", "relu", "leaky_relu", "sigmoid", "tensor_sum",
    "tensor_mean", "logsumexp", "l2_normalize", "conv2d", "conv2d_transpose",
    "bilinear_resample", "channel_scale_shift",
)
