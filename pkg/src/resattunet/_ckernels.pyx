# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Summation order matches the numpy versions so both backends produce
bitwise-identical results.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


cdef inline void _col_range(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W, Py_ssize_t Wo,
                            Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox whose source ox*stride + j - pad lies inside [0, W)
    cdef Py_ssize_t a = pad - j, b = W - 1 + pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    if lo[0] > Wo:
        lo[0] = Wo
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > Wo:
        hi[0] = Wo
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, lo, hi
    cdef floating* dst
    cdef floating* src
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _col_range(j, stride, pad, W, Wo, &lo, &hi)
                        for oy in range(Ho):
                            dst = &cols[b, row, oy * Wo]
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                memset(dst, 0, Wo * sizeof(floating))
                                continue
                            src = &x[b, c, iy, 0]
                            memset(dst, 0, lo * sizeof(floating))
                            if stride == 1:
                                memcpy(dst + lo, src + lo + j - pad, (hi - lo) * sizeof(floating))
                            else:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox * stride + j - pad]
                            memset(dst + hi, 0, (Wo - hi) * sizeof(floating))
    return out


def col2im(floating[:, :, ::1] cols, int C, int H, int W, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, lo, hi
    cdef floating* dst
    cdef floating* src
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        _col_range(j, stride, pad, W, Wo, &lo, &hi)
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            src = &cols[b, row, oy * Wo]
                            dst = &dx[b, c, iy, 0]
                            for ox in range(lo, hi):
                                dst[ox * stride + j - pad] += src[ox]
    return out


def maxpool2x2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, oy, ox
    cdef floating best, v
    cdef cnp.int8_t slot
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        best = x[b, c, 2 * oy, 2 * ox]
                        slot = 0
                        v = x[b, c, 2 * oy, 2 * ox + 1]
                        if v > best:
                            best = v
                            slot = 1
                        v = x[b, c, 2 * oy + 1, 2 * ox]
                        if v > best:
                            best = v
                            slot = 2
                        v = x[b, c, 2 * oy + 1, 2 * ox + 1]
                        if v > best:
                            best = v
                            slot = 3
                        out[b, c, oy, ox] = best
                        idx[b, c, oy, ox] = slot
    return out_arr, idx_arr


def maxpool2x2_backward(floating[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t B = grad.shape[0], C = grad.shape[1], Ho = grad.shape[2], Wo = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, c, oy, ox
    cdef int s
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        s = idx[b, c, oy, ox]
                        dx[b, c, 2 * oy + s // 2, 2 * ox + s % 2] = grad[b, c, oy, ox]
    return out


def _interp_rows(floating[:, ::1] x, Py_ssize_t[::1] i0, Py_ssize_t[::1] i1,
                 floating[::1] w0, floating[::1] w1):
    cdef Py_ssize_t R = x.shape[0], n_out = i0.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((R, n_out), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t r, i
    with nogil:
        for r in range(R):
            for i in range(n_out):
                out[r, i] = x[r, i0[i]] * w0[i] + x[r, i1[i]] * w1[i]
    return out_arr


def _interp_rows_backward(floating[:, ::1] g, Py_ssize_t[::1] i0, Py_ssize_t[::1] i1,
                          floating[::1] w0, floating[::1] w1, Py_ssize_t n_in):
    cdef Py_ssize_t R = g.shape[0], n_out = i0.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((R, n_in), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t r, i
    with nogil:
        for r in range(R):
            for i in range(n_out):
                out[r, i0[i]] += g[r, i] * w0[i]
            for i in range(n_out):
                out[r, i1[i]] += g[r, i] * w1[i]
    return out_arr


def interp_last_axis(x, i0, i1, w0, w1):
    lead = tuple(x.shape[:x.ndim - 1])
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[x.ndim - 1])
    out = _interp_rows(flat, np.ascontiguousarray(i0, dtype=np.intp),
                       np.ascontiguousarray(i1, dtype=np.intp), w0, w1)
    return out.reshape(lead + (len(i0),))


def interp_last_axis_backward(grad, i0, i1, w0, w1, n_in):
    lead = tuple(grad.shape[:grad.ndim - 1])
    flat = np.ascontiguousarray(grad).reshape(-1, grad.shape[grad.ndim - 1])
    out = _interp_rows_backward(flat, np.ascontiguousarray(i0, dtype=np.intp),
                                np.ascontiguousarray(i1, dtype=np.intp), w0, w1, n_in)
    return out.reshape(lead + (n_in,))
