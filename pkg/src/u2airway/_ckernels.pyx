# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: im2col/col2im, 2x2 max-pooling and 3D component labeling.

Every function writes into caller-allocated arrays; the dispatch layer in
``kernels.py`` owns allocation so both backends share one calling convention.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused floating:
    float
    double


def im2col(const floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
           int k, int stride, int pad, int dil, int oh, int ow):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oy in range(oh):
                            iy = oy * stride - pad + ki * dil
                            if iy < 0 or iy >= H:
                                for ox in range(ow):
                                    cols[n, row, oy * ow + ox] = 0
                                continue
                            for ox in range(ow):
                                ix = ox * stride - pad + kj * dil
                                if ix < 0 or ix >= W:
                                    cols[n, row, oy * ow + ox] = 0
                                else:
                                    cols[n, row, oy * ow + ox] = x[n, c, iy, ix]


def col2im(const floating[:, :, ::1] cols, floating[:, :, :, ::1] dx,
           int k, int stride, int pad, int dil, int oh, int ow):
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t n, c, ki, kj, oy, ox, iy, ix, row
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oy in range(oh):
                            iy = oy * stride - pad + ki * dil
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(ow):
                                ix = ox * stride - pad + kj * dil
                                if ix >= 0 and ix < W:
                                    dx[n, c, iy, ix] += cols[n, row, oy * ow + ox]


def maxpool2x2(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
               cnp.int64_t[:, :, :, ::1] arg):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, c, oy, ox, dy, dxx, iy, ix, best_i
    cdef floating best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(OH):
                    for ox in range(OW):
                        iy = 2 * oy
                        ix = 2 * ox
                        best = x[n, c, iy, ix]
                        best_i = iy * W + ix
                        # row-major scan, strict > keeps the first maximum
                        for dy in range(2):
                            for dxx in range(2):
                                if iy + dy < H and ix + dxx < W:
                                    v = x[n, c, iy + dy, ix + dxx]
                                    if v > best:
                                        best = v
                                        best_i = (iy + dy) * W + ix + dxx
                        out[n, c, oy, ox] = best
                        arg[n, c, oy, ox] = best_i


def maxpool2x2_backward(const floating[:, :, :, ::1] g, const cnp.int64_t[:, :, :, ::1] arg,
                        floating[:, :, :, ::1] dx):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], OH = g.shape[2], OW = g.shape[3]
    cdef Py_ssize_t W = dx.shape[3]
    cdef Py_ssize_t n, c, oy, ox, idx
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(OH):
                    for ox in range(OW):
                        idx = arg[n, c, oy, ox]
                        dx[n, c, idx // W, idx % W] += g[n, c, oy, ox]


cdef inline cnp.int32_t _find(cnp.int32_t[::1] parent, cnp.int32_t a) noexcept nogil:
    cdef cnp.int32_t root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


def label_raw(const cnp.uint8_t[:, :, ::1] mask, int connectivity,
              cnp.int32_t[:, :, ::1] out):
    """Two-pass union-find labeling.

    Labels come out numbered 1..K in order of each component's first voxel
    in row-major scan order. Returns K.
    """
    cdef Py_ssize_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2]
    cdef Py_ssize_t z, y, x, i, nz, ny, nx
    cdef cnp.int32_t nxt_label = 1, lab, other, ra, rb
    cdef int n_off
    cdef int[13][3] offs
    cdef cnp.int32_t[::1] parent = np.zeros(D * H * W + 1, dtype=np.int32)
    cdef cnp.int32_t[::1] remap = np.zeros(D * H * W + 1, dtype=np.int32)
    cdef cnp.int32_t k = 0

    # neighbours already visited in row-major order
    n_off = 0
    if connectivity == 6:
        offs[0][:] = [-1, 0, 0]
        offs[1][:] = [0, -1, 0]
        offs[2][:] = [0, 0, -1]
        n_off = 3
    else:
        for nz in range(-1, 1):
            for ny in range(-1, 2):
                for nx in range(-1, 2):
                    if nz == 0 and (ny > 0 or (ny == 0 and nx >= 0)):
                        continue
                    offs[n_off][0] = nz
                    offs[n_off][1] = ny
                    offs[n_off][2] = nx
                    n_off += 1

    with nogil:
        for z in range(D):
            for y in range(H):
                for x in range(W):
                    if mask[z, y, x] == 0:
                        out[z, y, x] = 0
                        continue
                    lab = 0
                    for i in range(n_off):
                        nz = z + offs[i][0]
                        ny = y + offs[i][1]
                        nx = x + offs[i][2]
                        if nz < 0 or ny < 0 or nx < 0 or ny >= H or nx >= W:
                            continue
                        other = out[nz, ny, nx]
                        if other == 0:
                            continue
                        if lab == 0:
                            lab = other
                        else:
                            ra = _find(parent, lab)
                            rb = _find(parent, other)
                            if ra < rb:
                                parent[rb] = ra
                            elif rb < ra:
                                parent[ra] = rb
                    if lab == 0:
                        lab = nxt_label
                        parent[lab] = lab
                        nxt_label += 1
                    out[z, y, x] = lab

        for z in range(D):
            for y in range(H):
                for x in range(W):
                    lab = out[z, y, x]
                    if lab == 0:
                        continue
                    ra = _find(parent, lab)
                    if remap[ra] == 0:
                        k += 1
                        remap[ra] = k
                    out[z, y, x] = remap[ra]
    return k
