# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution packing kernels.

Same contract as rmsda._kernels_py, bit for bit: im2col is a pure gather,
and col2im accumulates per destination cell in kernel-position-major
order (ki outer, kj inner), matching the NumPy fallback's pass order so
float addition happens in the same sequence.
"""
import numpy as np


ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, :] xpad, int k, int stride, int oh, int ow):
    """Pack padded input (B, C, HP, WP) into columns (B, C*k*k, oh*ow)."""
    cdef Py_ssize_t b = xpad.shape[0]
    cdef Py_ssize_t c = xpad.shape[1]
    if real is float:
        col_arr = np.empty((b, c * k * k, oh * ow), dtype=np.float32)
    else:
        col_arr = np.empty((b, c * k * k, oh * ow), dtype=np.float64)
    cdef real[:, :, ::1] col = col_arr
    cdef Py_ssize_t bi, ci, ki, kj, oy, ox, row, pos
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ci * k + ki) * k + kj
                        for oy in range(oh):
                            pos = oy * ow
                            for ox in range(ow):
                                col[bi, row, pos + ox] = xpad[
                                    bi, ci, oy * stride + ki, ox * stride + kj
                                ]
    return col_arr


def col2im(const real[:, :, :] col, int hp, int wp, int k, int stride,
           int oh, int ow):
    """Scatter-add columns (B, C*k*k, oh*ow) back to a padded grid."""
    cdef Py_ssize_t b = col.shape[0]
    cdef Py_ssize_t c = col.shape[1] // (k * k)
    if real is float:
        xpad_arr = np.zeros((b, c, hp, wp), dtype=np.float32)
    else:
        xpad_arr = np.zeros((b, c, hp, wp), dtype=np.float64)
    cdef real[:, :, :, ::1] xpad = xpad_arr
    cdef Py_ssize_t bi, ci, ki, kj, oy, ox, row, pos
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ci * k + ki) * k + kj
                        for oy in range(oh):
                            pos = oy * ow
                            for ox in range(ow):
                                xpad[bi, ci, oy * stride + ki,
                                     ox * stride + kj] += col[bi, row, pos + ox]
    return xpad_arr
