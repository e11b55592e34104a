"""Finite-difference verification of taped gradients.

gradcheck runs the function once under a tape to collect analytic
gradients, then perturbs input coordinates one at a time with central
differences and compares. Functions must be deterministic and free of
side effects; use float64 inputs and keep batch-norm running-stat
updates disabled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import GradTape, Tensor, active_tape


@dataclass
class GradcheckReport:
    """Outcome of one finite-difference comparison run."""

    n_checked: int
    max_rel_err: float
    mean_rel_err: float
    frac_within_tol: float
    tol: float
    passed: bool
    worst: list = field(default_factory=list)

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {state}: {self.n_checked} coords, "
            f"max rel err {self.max_rel_err:.3e}, "
            f"mean {self.mean_rel_err:.3e}, "
            f"{100.0 * self.frac_within_tol:.2f}% within {self.tol:.1e}"
        )


def gradcheck(fn: Callable[[Sequence[Tensor]], Tensor],
              points: Sequence[Tensor], *,
              h: float = 1e-3, tol: float = 1e-3,
              sample: Optional[int] = None,
              rng: Optional[np.random.Generator] = None,
              min_frac: float = 1.0,
              floor: float = 1e-6,
              leaves: Optional[Sequence[Tensor]] = None) -> GradcheckReport:
    """Compare taped gradients of fn against central differences.

    fn maps a list of tensors to a scalar tensor. Every coordinate of
    every point is checked unless sample limits the count (coordinates
    then drawn without replacement using rng). The relative error for a
    coordinate is |a - n| / max(|a|, |n|, floor); the run passes when at
    least min_frac of coordinates are within tol.

    When fn does not feed the given points into the graph directly but
    copies their values into persistent leaf tensors (model parameters),
    pass those leaves positionally via leaves; analytic gradients are
    read from them instead. fn must remain stateless: every call has to
    copy every point, so one perturbed evaluation cannot leak into the
    next.
    """
    if active_tape() is not None:
        raise ContractError("gradcheck must run outside any active tape")
    points = [p if isinstance(p, Tensor) else Tensor(p) for p in points]
    grad_sources = points if leaves is None else list(leaves)
    if len(grad_sources) != len(points):
        raise ContractError("leaves must match points one to one")

    with GradTape() as tape:
        loss = fn(points)
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"gradcheck needs a scalar loss; got {loss.shape}")
    grads = tape.backward(loss)
    analytic = [grads.get(p.uid) for p in grad_sources]

    sizes = [p.data.size for p in points]
    total = int(np.sum(sizes))
    if sample is not None and sample < total:
        if rng is None:
            rng = np.random.default_rng(0)
        flat_ids = np.sort(rng.choice(total, size=sample, replace=False))
    else:
        flat_ids = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    def eval_at(replaced: int, arr: np.ndarray) -> float:
        args = list(points)
        args[replaced] = Tensor(arr)
        return fn(args).item()

    rel_errs = np.empty(len(flat_ids), dtype=np.float64)
    worst: list = []
    for idx, fid in enumerate(flat_ids):
        ti = int(np.searchsorted(offsets, fid, side="right") - 1)
        ci = int(fid - offsets[ti])
        base = points[ti].data
        step = base.dtype.type(h)
        plus = base.copy()
        plus.flat[ci] += step
        minus = base.copy()
        minus.flat[ci] -= step
        numeric = (eval_at(ti, plus) - eval_at(ti, minus)) / (2.0 * float(step))
        a = 0.0 if analytic[ti] is None else float(analytic[ti].flat[ci])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        rel_errs[idx] = rel
        if rel > tol:
            worst.append((ti, ci, a, numeric, rel))

    worst.sort(key=lambda t: -t[4])
    frac_ok = float(np.mean(rel_errs <= tol)) if len(rel_errs) else 1.0
    return GradcheckReport(
        n_checked=len(flat_ids),
        max_rel_err=float(rel_errs.max()) if len(rel_errs) else 0.0,
        mean_rel_err=float(rel_errs.mean()) if len(rel_errs) else 0.0,
        frac_within_tol=frac_ok,
        tol=tol,
        passed=frac_ok >= min_frac,
        worst=worst[:10],
    )
