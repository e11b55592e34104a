"""Differentiable primitive operations on 4-D tensors.

Each primitive computes its forward value eagerly and, when a GradTape is
active, records a closure mapping the output gradient to per-input
gradients. Convolution runs as im2col packing plus a BLAS matmul; the
packing kernels come from rmsda.backend (compiled or NumPy). Reductions
(sum_all, mean_all, global_avg_pool, batch-norm statistics) accumulate in
float64 regardless of tensor dtype.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .. import backend
from ..errors import ContractError, ShapeError
from .tensor import Tensor, active_tape

VALID_KERNEL_SIZES = (1, 3, 5, 7, 9)
VALID_STRIDES = (1, 2)

# Column-buffer budget in elements; conv splits output rows into chunks so
# no intermediate exceeds this (roughly 128 MB at float32).
_COL_BUDGET = 1 << 25

_matrix_cache: dict = {}


def _record(op: str, inputs, out: Tensor, backward) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)


def _same_dtype(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(
                f"{op}: mixed dtypes {dt} and {t.dtype}; cast inputs first"
            )


def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")
    return tuple(out)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b with per-axis broadcasting (sizes equal or 1)."""
    _same_dtype("add", a, b)
    _broadcast_shape("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    _record("add", (a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b with per-axis broadcasting (sizes equal or 1)."""
    _same_dtype("mul", a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    _record("mul", (a, b), out, bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b with broadcasting; caller keeps b away from zero."""
    _same_dtype("div", a, b)
    _broadcast_shape("div", a.shape, b.shape)
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    _record("div", (a, b), out, bwd)
    return out


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """x * scale + shift with python-float constants."""
    s = x.dtype.type(scale)
    c = x.dtype.type(shift)
    out = Tensor(x.data * s + c)

    def bwd(g):
        return (g * s,)

    _record("affine", (x,), out, bwd)
    return out


def log(x: Tensor) -> Tensor:
    """Natural log; defined for strictly positive inputs."""
    out = Tensor(np.log(x.data))

    def bwd(g):
        return (g / x.data,)

    _record("log", (x,), out, bwd)
    return out


def pow_const(x: Tensor, p: float) -> Tensor:
    """x ** p for a python-float exponent; x must be positive when p < 1."""
    out = Tensor(np.power(x.data, x.dtype.type(p)))

    def bwd(g):
        if p == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.dtype.type(p) * np.power(x.data, x.dtype.type(p - 1.0)),)

    _record("pow_const", (x,), out, bwd)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi, else zero."""
    if not lo < hi:
        raise ContractError(f"clamp: need lo < hi, got [{lo}, {hi}]")
    out = Tensor(np.clip(x.data, x.dtype.type(lo), x.dtype.type(hi)))
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * mask,)

    _record("clamp", (x,), out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    _record("relu", (x,), out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed stably and clipped to the open (0, 1).

    The clip keeps downstream log() finite even when float32 saturates.
    """
    xd = x.data
    out_arr = np.empty_like(xd)
    pos = xd >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_arr[~pos] = ex / (1.0 + ex)
    fi = np.finfo(xd.dtype)
    np.clip(out_arr, fi.tiny, np.nextafter(xd.dtype.type(1), xd.dtype.type(0)),
            out=out_arr)
    out = Tensor(out_arr)

    def bwd(g):
        return (g * out_arr * (1.0 - out_arr),)

    _record("sigmoid", (x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    """Total over all elements, accumulated in float64; result is (1,1,1,1)."""
    val = x.data.sum(dtype=np.float64)
    out = Tensor(np.full((1, 1, 1, 1), val, dtype=x.dtype))

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), x.shape),)

    _record("sum_all", (x,), out, bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over all elements, accumulated in float64; result is (1,1,1,1)."""
    val = x.data.mean(dtype=np.float64)
    out = Tensor(np.full((1, 1, 1, 1), val, dtype=x.dtype))
    inv = 1.0 / x.data.size

    def bwd(g):
        return (np.broadcast_to(g.reshape(()) * x.dtype.type(inv), x.shape),)

    _record("mean_all", (x,), out, bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (B, N, L, K) -> (B, N, 1, 1), float64 accumulation."""
    val = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    out = Tensor(val.astype(x.dtype))
    inv = 1.0 / (x.shape[2] * x.shape[3])

    def bwd(g):
        return (np.broadcast_to(g * x.dtype.type(inv), x.shape),)

    _record("global_avg_pool", (x,), out, bwd)
    return out


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 and ceil output sizing.

    Output is (ceil(L/2), ceil(K/2)); a ragged edge window averages only
    the cells that exist, so a lone edge cell passes through unchanged.
    """
    b, n, h, w = x.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    padded = np.zeros((b, n, oh * 2, ow * 2), dtype=x.dtype)
    padded[:, :, :h, :w] = x.data
    sums = padded.reshape(b, n, oh, 2, ow, 2).sum(axis=(3, 5))
    rows = np.minimum(2, h - 2 * np.arange(oh))
    cols = np.minimum(2, w - 2 * np.arange(ow))
    cnt = np.outer(rows, cols).astype(x.dtype)
    out = Tensor(sums / cnt)

    def bwd(g):
        per_cell = g / cnt
        up = np.repeat(np.repeat(per_cell, 2, axis=2), 2, axis=3)
        return (np.ascontiguousarray(up[:, :, :h, :w]),)

    _record("avg_pool2x2", (x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# structure


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must match."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels: need at least one input")
    _same_dtype("concat_channels", *xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels: incompatible shapes {ref} and {t.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    _record("concat_channels", xs, out, bwd)
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer on channel vectors.

    x is (B, N, 1, 1), weight (M, N, 1, 1), bias (1, M, 1, 1); the result
    is (B, M, 1, 1) with y = W x + b per batch row.
    """
    _same_dtype("dense", x, weight, bias)
    b, n = x.shape[0], x.shape[1]
    m = weight.shape[0]
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"dense: input must be (B, N, 1, 1); got {x.shape}")
    if weight.shape[1] != n or weight.shape[2:] != (1, 1):
        raise ShapeError(
            f"dense: weight {weight.shape} does not match input channels {n}"
        )
    if bias.shape != (1, m, 1, 1):
        raise ShapeError(f"dense: bias must be (1, {m}, 1, 1); got {bias.shape}")
    x2 = x.data.reshape(b, n)
    w2 = weight.data.reshape(m, n)
    y = x2 @ w2.T + bias.data.reshape(1, m)
    out = Tensor(y.reshape(b, m, 1, 1))

    def bwd(g):
        g2 = g.reshape(b, m)
        gx = (g2 @ w2).reshape(x.shape)
        gw = (g2.T @ x2).reshape(weight.shape)
        gb = g2.sum(axis=0).reshape(bias.shape)
        return gx, gw, gb

    _record("dense", (x, weight, bias), out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """SAME padding arithmetic: returns (pad_before, pad_after, out_size).

    out = ceil(size / stride); total = max((out - 1) * stride + k - size, 0);
    the extra cell of an odd total goes after.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    return before, total - before, out


def _row_chunks(oh: int, ow: int, ckk: int) -> list[tuple[int, int]]:
    rows = max(1, min(oh, _COL_BUDGET // max(1, ckk * ow)))
    return [(y0, min(oh, y0 + rows)) for y0 in range(0, oh, rows)]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution with SAME padding.

    x is (B, C, L, K); weight (O, C, k, k) with square k in {1,3,5,7,9};
    bias (1, O, 1, 1); stride in {1, 2}. Output spatial size is
    ceil(L / stride) by ceil(K / stride). Implemented as im2col plus a
    single matmul per row chunk; backward rebuilds the column buffers
    instead of keeping them alive.
    """
    _same_dtype("conv2d", x, weight, bias)
    if stride not in VALID_STRIDES:
        raise ContractError(f"conv2d: stride must be one of {VALID_STRIDES}")
    bsz, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if kh != kw or kh not in VALID_KERNEL_SIZES:
        raise ShapeError(
            f"conv2d: kernel must be square with size in {VALID_KERNEL_SIZES}; "
            f"got {kh}x{kw}"
        )
    if cw != c:
        raise ShapeError(
            f"conv2d: weight expects {cw} input channels, tensor has {c}"
        )
    if bias.shape != (1, o, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1, {o}, 1, 1); got {bias.shape}")
    k = kh
    ph0, ph1, oh = same_pad(h, k, stride)
    pw0, pw1, ow = same_pad(w, k, stride)
    wm = weight.data.reshape(o, c * k * k)

    if k == 1 and ph0 == ph1 == pw0 == pw1 == 0:
        xs = np.ascontiguousarray(x.data[:, :, ::stride, ::stride])
        y = np.matmul(wm, xs.reshape(bsz, c, oh * ow)) + bias.data.reshape(1, o, 1)
        out = Tensor(y.reshape(bsz, o, oh, ow))

        def bwd(g):
            return _conv2d_backward_1x1(x, weight, stride, xs, g)

        _record("conv2d", (x, weight, bias), out, bwd)
        return out

    xpad = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    y = np.empty((bsz, o, oh, ow), dtype=x.dtype)
    bcol = bias.data.reshape(1, o, 1)
    for y0, y1 in _row_chunks(oh, ow, c * k * k):
        rows = xpad[:, :, y0 * stride : (y1 - 1) * stride + k, :]
        col = backend.im2col(rows, k, stride, y1 - y0, ow)
        y[:, :, y0:y1, :] = (np.matmul(wm, col) + bcol).reshape(
            bsz, o, y1 - y0, ow
        )
    out = Tensor(y)
    pads = (ph0, ph1, pw0, pw1)

    def bwd(g):
        return _conv2d_backward(x, weight, stride, pads, g)

    _record("conv2d", (x, weight, bias), out, bwd)
    return out


def _conv2d_backward_1x1(x: Tensor, weight: Tensor, stride: int,
                         xs: np.ndarray, g: np.ndarray):
    bsz, c, h, w = x.shape
    o = weight.shape[0]
    oh, ow = g.shape[2], g.shape[3]
    wm = weight.data.reshape(o, c)
    gm = g.reshape(bsz, o, oh * ow)
    xs2 = xs.reshape(bsz, c, oh * ow)
    gw = np.matmul(gm, xs2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gxs = np.matmul(wm.T, gm).reshape(bsz, c, oh, ow)
    if stride == 1:
        gx = gxs
    else:
        gx = np.zeros_like(x.data)
        gx[:, :, ::stride, ::stride] = gxs
    gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
    return gx, gw, gb


def _conv2d_backward(x: Tensor, weight: Tensor, stride: int, pads: tuple,
                     g: np.ndarray):
    """Gradients for the padded conv path; tests may substitute this hook."""
    bsz, c, h, w = x.shape
    o, _, k, _ = weight.shape
    ph0, ph1, pw0, pw1 = pads
    oh, ow = g.shape[2], g.shape[3]
    wm = weight.data.reshape(o, c * k * k)
    xpad = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    gxpad = np.zeros_like(xpad)
    gw = np.zeros((o, c * k * k), dtype=x.dtype)
    for y0, y1 in _row_chunks(oh, ow, c * k * k):
        rows = xpad[:, :, y0 * stride : (y1 - 1) * stride + k, :]
        col = backend.im2col(rows, k, stride, y1 - y0, ow)
        gm = np.ascontiguousarray(g[:, :, y0:y1, :]).reshape(bsz, o, -1)
        gw += np.matmul(gm, col.transpose(0, 2, 1)).sum(axis=0)
        gcol = np.matmul(wm.T, gm)
        gxpad[:, :, y0 * stride : (y1 - 1) * stride + k, :] += backend.col2im(
            gcol, rows.shape[2], rows.shape[3], k, stride, y1 - y0, ow
        )
    gx = np.ascontiguousarray(gxpad[:, :, ph0 : ph0 + h, pw0 : pw0 + w])
    gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
    return gx, gw.reshape(weight.shape), gb


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: Tensor, running_var: Tensor, *,
                 eps: float = 1e-5, momentum: float = 0.1,
                 training: bool = True,
                 update_running: Optional[bool] = None) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with the batch mean and biased variance over
    (B, L, K), accumulated in float64, and (when update_running is true)
    folds them into the running buffers in place:
    running = (1 - momentum) * running + momentum * batch_stat.
    Inference mode normalizes with the running buffers. gamma, beta,
    running_mean, running_var are all (1, N, 1, 1); only gamma and beta
    receive gradients.
    """
    _same_dtype("batch_norm2d", x, gamma, beta, running_mean, running_var)
    n = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (1, n, 1, 1):
            raise ShapeError(
                f"batch_norm2d: {name} must be (1, {n}, 1, 1); got {t.shape}"
            )
    if update_running is None:
        update_running = training

    if training:
        mean64 = x.data.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        diff64 = x.data.astype(np.float64) - mean64
        var64 = np.mean(diff64 * diff64, axis=(0, 2, 3), keepdims=True)
        if update_running:
            m = float(momentum)
            np.copyto(running_mean.data,
                      ((1.0 - m) * running_mean.data.astype(np.float64)
                       + m * mean64).astype(x.dtype))
            np.copyto(running_var.data,
                      ((1.0 - m) * running_var.data.astype(np.float64)
                       + m * var64).astype(x.dtype))
        istd = (1.0 / np.sqrt(var64 + eps)).astype(x.dtype)
        xhat = ((x.data - mean64.astype(x.dtype)) * istd).astype(x.dtype, copy=False)
        out = Tensor(gamma.data * xhat + beta.data)
        m_count = x.shape[0] * x.shape[2] * x.shape[3]

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (istd / m_count) * (m_count * dxhat - s1 - xhat * s2)
            return dx.astype(x.dtype, copy=False), dgamma, dbeta, None, None

        _record("batch_norm2d", (x, gamma, beta, running_mean, running_var),
                out, bwd)
        return out

    istd = (1.0 / np.sqrt(running_var.data.astype(np.float64) + eps)).astype(x.dtype)
    xhat = (x.data - running_mean.data) * istd
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        dx = g * (gamma.data * istd)
        return dx, dgamma, dbeta, None, None

    _record("batch_norm2d", (x, gamma, beta, running_mean, running_var), out, bwd)
    return out


# ---------------------------------------------------------------------------
# interpolation


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = math.floor(src)
        frac = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        a[o, lo] += 1.0 - frac
        a[o, hi] += frac
    return a


def _cubic_kernel(t: float, a: float = -0.5) -> float:
    at = abs(t)
    if at <= 1.0:
        return (a + 2.0) * at ** 3 - (a + 3.0) * at ** 2 + 1.0
    if at < 2.0:
        return a * at ** 3 - 5.0 * a * at ** 2 + 8.0 * a * at - 4.0 * a
    return 0.0


def _bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D Catmull-Rom (a = -0.5) matrix with half-pixel centers, edges clamped."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = math.floor(src)
        for m in (-1, 0, 1, 2):
            i = i0 + m
            wgt = _cubic_kernel(src - i)
            a[o, min(max(i, 0), n_in - 1)] += wgt
    return a


def _interp_matrix(kind: str, n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (kind, n_in, n_out, np.dtype(dtype).str)
    mat = _matrix_cache.get(key)
    if mat is None:
        build = _bilinear_matrix if kind == "bilinear" else _bicubic_matrix
        mat = np.ascontiguousarray(build(n_in, n_out).astype(dtype))
        _matrix_cache[key] = mat
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to a larger spatial size (half-pixel convention).

    Separable: y = A_h x A_w^T with cached 1-D interpolation matrices, so
    the backward pass is the exact transpose product.
    """
    b, n, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(
            f"bilinear_upsample: target {out_h}x{out_w} is smaller than {h}x{w}"
        )
    ah = _interp_matrix("bilinear", h, out_h, x.dtype)
    aw = _interp_matrix("bilinear", w, out_w, x.dtype)
    y = np.matmul(np.matmul(ah, x.data), aw.T)
    out = Tensor(y)

    def bwd(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    _record("bilinear_upsample", (x,), out, bwd)
    return out


def bilinear_resize_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (H, W) float array; not taped."""
    if img.ndim != 2:
        raise ShapeError(f"bilinear_resize_array: expected 2-D; got {img.shape}")
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    ah = _interp_matrix("bilinear", img.shape[0], out_h, dtype)
    aw = _interp_matrix("bilinear", img.shape[1], out_w, dtype)
    return ah @ img.astype(dtype, copy=False) @ aw.T


def bicubic_resize_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom bicubic resize of a (H, W) or (H, W, C) float array.

    Not differentiable and never taped; the data pipeline uses it to
    normalize raw image sizes before tensors exist.
    """
    if img.ndim not in (2, 3):
        raise ShapeError(f"bicubic_resize_array: expected 2-D or 3-D; got {img.shape}")
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    ah = _interp_matrix("bicubic", img.shape[0], out_h, dtype)
    aw = _interp_matrix("bicubic", img.shape[1], out_w, dtype)
    if img.ndim == 2:
        return ah @ img.astype(dtype, copy=False) @ aw.T
    planes = img.astype(dtype, copy=False).transpose(2, 0, 1)
    res = np.matmul(np.matmul(ah, planes), aw.T)
    return res.transpose(1, 2, 0)
