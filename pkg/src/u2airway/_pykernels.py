"""Pure-Python/NumPy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures, same output-argument convention. Used when the extension is
not built or when ``U2AIRWAY_PURE=1`` is set.
"""
import numpy as np


def _windows(k, stride, pad, dil, oh, ow):
    for ki in range(k):
        for kj in range(k):
            y0 = ki * dil
            x0 = kj * dil
            yield ki, kj, slice(y0, y0 + stride * (oh - 1) + 1, stride), slice(x0, x0 + stride * (ow - 1) + 1, stride)


def im2col(x, cols, k, stride, pad, dil, oh, ow):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    view = cols.reshape(n, c, k, k, oh, ow)
    for ki, kj, sy, sx in _windows(k, stride, pad, dil, oh, ow):
        view[:, :, ki, kj] = xp[:, :, sy, sx]


def col2im(cols, dx, k, stride, pad, dil, oh, ow):
    n, c, h, w = dx.shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dx.dtype)
    view = cols.reshape(n, c, k, k, oh, ow)
    for ki, kj, sy, sx in _windows(k, stride, pad, dil, oh, ow):
        dxp[:, :, sy, sx] += view[:, :, ki, kj]
    dx += dxp[:, :, pad:pad + h, pad:pad + w]


def maxpool2x2(x, out, arg):
    n, c, h, w = x.shape
    oh, ow = out.shape[2:]
    # pad with -inf so the truncated last window never wins on padding
    xp = np.full((n, c, 2 * oh, 2 * ow), -np.inf, dtype=x.dtype)
    xp[:, :, :h, :w] = x
    win = xp.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    pos = np.argmax(win, axis=-1)  # first occurrence on ties
    out[...] = np.take_along_axis(win, pos[..., None], axis=-1)[..., 0]
    dy, dxx = np.divmod(pos, 2)
    rows = 2 * np.arange(oh)[:, None] + dy
    colsx = 2 * np.arange(ow)[None, :] + dxx
    arg[...] = rows * w + colsx


def maxpool2x2_backward(g, arg, dx):
    n, c, h, w = dx.shape
    flat = dx.reshape(n * c, h * w)
    idx = arg.reshape(n * c, -1)
    gg = g.reshape(n * c, -1)
    for r in range(n * c):
        np.add.at(flat[r], idx[r], gg[r])


def _offsets(connectivity):
    if connectivity == 6:
        return [(-1, 0, 0), (0, -1, 0), (0, 0, -1)]
    offs = []
    for dz in (-1, 0):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                    continue
                offs.append((dz, dy, dx))
    return offs


def label_raw(mask, connectivity, out):
    """Union-find over adjacency edges found with shifted-array comparisons."""
    d, h, w = mask.shape
    fg = mask.astype(bool)
    flat_idx = np.arange(d * h * w).reshape(d, h, w)
    parent = list(range(d * h * w))

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for dz, dy, dx in _offsets(connectivity):
        # pair voxel p with its earlier neighbour p + offset
        zs = slice(max(0, -dz), d - max(0, dz))
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        zn = slice(zs.start + dz, zs.stop + dz)
        yn = slice(ys.start + dy, ys.stop + dy)
        xn = slice(xs.start + dx, xs.stop + dx)
        both = fg[zs, ys, xs] & fg[zn, yn, xn]
        a_idx = flat_idx[zs, ys, xs][both]
        b_idx = flat_idx[zn, yn, xn][both]
        for a, b in zip(a_idx.tolist(), b_idx.tolist()):
            ra, rb = find(a), find(b)
            if ra != rb:
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb

    out[...] = 0
    fg_idx = np.flatnonzero(fg)
    roots = np.array([find(i) for i in fg_idx.tolist()], dtype=np.int64)
    # roots are the smallest flat index in each component, so ordering the
    # unique roots gives first-voxel scan order
    uniq, inv = np.unique(roots, return_inverse=True)
    out.reshape(-1)[fg_idx] = (inv + 1).astype(out.dtype)
    return len(uniq)
