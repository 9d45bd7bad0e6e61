"""Backend selection for the hot loops.

The compiled extension ``_ckernels`` is used when it imports cleanly and the
environment variable ``U2AIRWAY_PURE`` is unset; otherwise the NumPy versions
in ``_pykernels`` are used. ``use_backend`` switches at runtime (tests and the
benchmark compare the two).
"""
import os
from contextlib import contextmanager

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_active = _BACKENDS["python"] if os.environ.get("U2AIRWAY_PURE") or _ckernels is None else _ckernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "compiled" if _active is _ckernels and _ckernels is not None else "python"


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    _active = _BACKENDS[name]


@contextmanager
def use_backend(name):
    prev = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def im2col(x, k, stride, pad, dil, oh, ow):
    x = np.ascontiguousarray(x)
    n, c = x.shape[:2]
    cols = np.empty((n, c * k * k, oh * ow), dtype=x.dtype)
    _active.im2col(x, cols, k, stride, pad, dil, oh, ow)
    return cols


def col2im(cols, shape, k, stride, pad, dil, oh, ow):
    cols = np.ascontiguousarray(cols)
    dx = np.zeros(shape, dtype=cols.dtype)
    _active.col2im(cols, dx, k, stride, pad, dil, oh, ow)
    return dx


def maxpool2x2(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    _active.maxpool2x2(x, out, arg)
    return out, arg


def maxpool2x2_backward(g, arg, shape):
    dx = np.zeros(shape, dtype=g.dtype)
    _active.maxpool2x2_backward(np.ascontiguousarray(g), arg, dx)
    return dx


def label_raw(mask, connectivity):
    """Label foreground voxels 1..K in first-voxel scan order; returns (labels, K)."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out = np.zeros(mask.shape, dtype=np.int32)
    k = _active.label_raw(mask, connectivity, out)
    return out, int(k)
