"""NumPy implementation of the convolution packing kernels.

im2col / col2im are the data-movement half of the GEMM convolution; the
compiled module in _kernels.pyx implements the same two functions. Both
backends accumulate in kernel-position-major order (ki outer, kj inner),
so their outputs are bitwise identical and either can serve as a drop-in
for the other.
"""
import numpy as np


def im2col(xpad, k: int, stride: int, oh: int, ow: int):
    """Pack padded input (B, C, HP, WP) into columns (B, C*k*k, oh*ow).

    Row r = (c*k + ki)*k + kj of the output holds, for every output
    position (oy, ox), the input value at (c, oy*stride + ki, ox*stride + kj).
    """
    b, c, hp, wp = xpad.shape
    col = np.empty((b, c, k, k, oh, ow), dtype=xpad.dtype)
    for ki in range(k):
        for kj in range(k):
            col[:, :, ki, kj] = xpad[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ]
    return col.reshape(b, c * k * k, oh * ow)


def col2im(col, hp: int, wp: int, k: int, stride: int, oh: int, ow: int):
    """Scatter-add columns (B, C*k*k, oh*ow) back to a padded grid (B, C, HP, WP).

    Exact adjoint of im2col: values mapping to the same input cell are summed,
    ki-major then kj, matching the compiled kernel's accumulation order.
    """
    b = col.shape[0]
    c = col.shape[1] // (k * k)
    colv = col.reshape(b, c, k, k, oh, ow)
    xpad = np.zeros((b, c, hp, wp), dtype=col.dtype)
    for ki in range(k):
        for kj in range(k):
            xpad[
                :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
            ] += colv[:, :, ki, kj]
    return xpad
