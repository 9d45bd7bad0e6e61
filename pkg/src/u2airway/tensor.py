"""A small reverse-mode autodiff engine over dense NumPy arrays.

Only what the nested-U network needs: 2D convolution, batch norm, relu,
sigmoid, 2x2 max-pooling, bilinear resizing, channel concatenation and a
handful of elementwise/reduction ops. There is no broadcasting between
tensors; binary ops take equal shapes or a Python scalar.
"""
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ValidationError

_grad_enabled = True


@contextmanager
def no_grad():
    """Run operations without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._retain = False

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if root.size != 1:
        raise ValidationError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _topological(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _same_shape(x, y, op):
    if x.shape != y.shape:
        raise ValidationError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


# elementwise and reductions

def add(x, y):
    _same_shape(x, y, "add")
    return Tensor._from_op(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x, y):
    _same_shape(x, y, "sub")
    return Tensor._from_op(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x, y):
    _same_shape(x, y, "mul")
    return Tensor._from_op(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data))


def div(x, y):
    _same_shape(x, y, "div")
    out = x.data / y.data
    return Tensor._from_op(out, (x, y), lambda g: (g / y.data, -g * out / y.data))


def neg(x):
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def scale(x, c):
    c = x.dtype.type(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,))


def shift(x, c):
    return Tensor._from_op(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reduce_sum(x):
    return sum_(x)


def reduce_mean(x):
    return mean(x)


def relu(x):
    on = x.data > 0
    return Tensor._from_op(x.data * on, (x,), lambda g: (g * on,))


def sigmoid(x):
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # saturation would otherwise round to exactly 0 or 1
    fi = np.finfo(x.dtype)
    np.clip(out, fi.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


# spatial ops, all on N x C x H x W

def _check_4d(x, op):
    if x.ndim != 4:
        raise ValidationError(f"{op}: expected N x C x H x W, got shape {x.shape}")


def conv_out_extent(n, k, stride, pad, dilation):
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Cross-correlation of x with w (no kernel flip) plus per-channel bias."""
    _check_4d(x, "conv2d")
    _check_4d(w, "conv2d")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ValidationError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ValidationError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValidationError("conv2d: need stride >= 1, dilation >= 1, padding >= 0")
    if b is not None and b.shape != (cout,):
        raise ValidationError(f"conv2d: bias shape {b.shape} != ({cout},)")
    oh = conv_out_extent(h, k, stride, padding, dilation)
    ow = conv_out_extent(wd, k, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ValidationError(f"conv2d: non-positive output extent {oh}x{ow} for input {h}x{wd}")

    cols = kernels.im2col(x.data, k, stride, padding, dilation, oh, ow)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, oh, ow)

    def bw(g):
        g2 = g.reshape(n, cout, oh * ow)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            dx = kernels.col2im(dcols, x.shape, k, stride, padding, dilation, oh, ow)
        db = g2.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, bw)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Batch norm over (N, H, W) per channel.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode (population variance, ``momentum`` weight on the new batch).
    """
    _check_4d(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValidationError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if m < 2:
            raise ValidationError(
                f"batchnorm2d: training mode needs N*H*W >= 2 per channel, got {m} (shape {x.shape})")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), bw)


def maxpool2d(x):
    """2x2 / stride-2 max pooling, ceil mode; ties go to the first element in row-major order."""
    _check_4d(x, "maxpool2d")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ValidationError(f"maxpool2d: spatial extents must be >= 2, got {x.shape[2:]}")
    out, arg = kernels.maxpool2x2(x.data)
    return Tensor._from_op(out, (x,), lambda g: (kernels.maxpool2x2_backward(g, arg, x.shape),))


@lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out, mode, dtype):
    a = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    if mode == "nearest":
        a[rows, (rows * n_in) // n_out] = 1.0
    elif n_in == 1:
        a[:, 0] = 1.0
    elif n_out == 1:
        a[0, 0] = 1.0
    else:
        # corner-aligned: output i samples source coordinate i*(n_in-1)/(n_out-1)
        src = rows * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
        frac = src - i0
        a[rows, i0] += 1.0 - frac
        a[rows, i0 + 1] += frac
    a = a.astype(dtype)
    a.flags.writeable = False
    return a


def upsample2d(x, factor=None, size=None, mode="bilinear"):
    """Resize H x W by an integer ``factor`` or to an explicit ``size``.

    Bilinear uses corner-aligned sampling; ``mode="nearest"`` is kept for ablations.
    """
    _check_4d(x, "upsample2d")
    if mode not in ("bilinear", "nearest"):
        raise ValidationError(f"upsample2d: unknown mode {mode!r}")
    h, w = x.shape[2:]
    if size is None:
        if factor is None or int(factor) < 2:
            raise ValidationError(f"upsample2d: factor must be an integer >= 2, got {factor}")
        size = (int(factor) * h, int(factor) * w)
    oh, ow = size
    if (oh, ow) == (h, w):
        return x
    ah = _interp_matrix(h, oh, mode, x.dtype.str)
    aw = _interp_matrix(w, ow, mode, x.dtype.str)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return Tensor._from_op(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def concat_channels(xs):
    xs = list(xs)
    if not xs:
        raise ValidationError("concat_channels: empty input list")
    for t in xs:
        _check_4d(t, "concat_channels")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValidationError(f"concat_channels: extent mismatch {t.shape} vs {ref}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([t.shape[1] for t in xs])[:-1]
    return Tensor._from_op(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=1)))


def channel_mean(x):
    """Mean over the channel axis, keeping it (N x 1 x H x W)."""
    return mean(x, axis=1, keepdims=True)
