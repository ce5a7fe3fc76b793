# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from cython cimport floating

cnp.import_array()


def _im2col(const floating[:, :, :, ::1] x, floating[:, :, ::1] out,
            int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b, c, i, j, oy, ox, row, col, iy, ix
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (W + 2 * padding - kw) // stride + 1
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy * stride + i - padding
                            for ox in range(wo):
                                ix = ox * stride + j - padding
                                col = oy * wo + ox
                                if 0 <= iy < H and 0 <= ix < W:
                                    out[b, row, col] = x[b, c, iy, ix]
                                else:
                                    out[b, row, col] = 0


def _col2im(const floating[:, :, ::1] cols, floating[:, :, :, ::1] out,
            int kh, int kw, int stride, int padding):
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, ix
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (W + 2 * padding - kw) // stride + 1
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy * stride + i - padding
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - padding
                                if 0 <= ix < W:
                                    out[b, c, iy, ix] += cols[b, row, oy * wo + ox]


def im2col(x, int kh, int kw, int stride, int padding):
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.empty((b, c * kh * kw, ho * wo), dtype=x.dtype)
    _im2col(x, out, kh, kw, stride, padding)
    return out


def col2im(cols, shape, int kh, int kw, int stride, int padding):
    cols = np.ascontiguousarray(cols)
    b, c, h, w = shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(b, c * kh * kw, ho * wo)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, padding)
    return out


def linear_sum_assignment(cost):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def greedy_match(iou, double threshold):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(iou, dtype=np.float64)
    cdef Py_ssize_t npred = a.shape[0], ngt = a.shape[1], d, g, best
    cdef double best_iou, val
    cdef unsigned char[::1] taken = np.zeros(max(ngt, 1), dtype=np.uint8)
    out = np.full(npred, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for d in range(npred):
        best = -1
        best_iou = threshold
        for g in range(ngt):
            if taken[g]:
                continue
            val = a[d, g]
            if val >= best_iou and (best < 0 or val > best_iou):
                best = g
                best_iou = val
        if best >= 0:
            taken[best] = 1
            o[d] = best
    return out
