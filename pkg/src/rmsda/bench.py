"""Benchmark comparing the compiled and NumPy packing kernels.

Times im2col/col2im in isolation and a full conv2d forward+backward at a
few representative shapes, once per backend, and checks that the two
backends agree bitwise on identical inputs.
"""
from __future__ import annotations

import time

import numpy as np

from . import backend
from .engine import GradTape, Tensor
from .engine import ops

CASES = (
    # (batch, channels, size, kernel, stride)
    (2, 16, 64, 3, 1),
    (2, 16, 64, 5, 1),
    (2, 48, 32, 3, 2),
    (1, 64, 56, 5, 1),
)


def _time(fn, repeats: int) -> float:
    fn()  # warm once
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(repeats: int = 5) -> list[dict]:
    """Returns one row per (case, backend) with timings in seconds."""
    if not backend.has_compiled():
        raise RuntimeError("compiled kernels are unavailable; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []
    original = backend.backend_name()
    try:
        for b, c, s, k, stride in CASES:
            x = rng.standard_normal((b, c, s, s)).astype(np.float32)
            w = rng.standard_normal((c, c, k, k)).astype(np.float32) * 0.05
            bias = np.zeros((1, c, 1, 1), dtype=np.float32)
            ph0, ph1, oh = ops.same_pad(s, k, stride)
            pw0, pw1, ow = ops.same_pad(s, k, stride)
            xpad = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
            col_ref = {}
            for name in ("compiled", "python"):
                backend.set_backend(name)
                col = backend.im2col(xpad, k, stride, oh, ow)
                col_ref[name] = col
                t_pack = _time(lambda: backend.im2col(xpad, k, stride, oh, ow),
                               repeats)
                t_unpack = _time(
                    lambda: backend.col2im(col, xpad.shape[2], xpad.shape[3],
                                           k, stride, oh, ow), repeats)

                def conv_step():
                    xt = Tensor(x)
                    wt = Tensor(w)
                    bt = Tensor(bias)
                    with GradTape() as tape:
                        out = ops.conv2d(xt, wt, bt, stride)
                        loss = ops.sum_all(out)
                    tape.backward(loss)

                t_conv = _time(conv_step, repeats)
                rows.append({
                    "case": f"B{b} C{c} {s}x{s} k{k} s{stride}",
                    "backend": name,
                    "im2col_s": t_pack,
                    "col2im_s": t_unpack,
                    "conv_fwd_bwd_s": t_conv,
                })
            if not np.array_equal(col_ref["compiled"], col_ref["python"]):
                raise AssertionError("backends disagree on im2col output")
    finally:
        backend.set_backend(original if original != "auto" else "auto")
    return rows


def format_rows(rows: list[dict]) -> str:
    lines = [f"{'case':<22} {'backend':<9} {'im2col':>10} {'col2im':>10} {'conv f+b':>10}"]
    for r in rows:
        lines.append(
            f"{r['case']:<22} {r['backend']:<9} "
            f"{r['im2col_s'] * 1e3:>8.2f}ms {r['col2im_s'] * 1e3:>8.2f}ms "
            f"{r['conv_fwd_bwd_s'] * 1e3:>8.2f}ms"
        )
    by_case: dict = {}
    for r in rows:
        by_case.setdefault(r["case"], {})[r["backend"]] = r
    for case, pair in by_case.items():
        if len(pair) == 2:
            pack = pair["python"]["im2col_s"] / max(pair["compiled"]["im2col_s"], 1e-12)
            scat = pair["python"]["col2im_s"] / max(pair["compiled"]["col2im_s"], 1e-12)
            lines.append(
                f"{case}: compiled pack {pack:.2f}x, scatter-add {scat:.2f}x "
                f"vs numpy"
            )
    return "\n".join(lines)
