"""Central finite-difference verification of reverse-mode gradients.

This is the independent oracle against which every differentiable
operation in the package is validated: perturb each coordinate of each
input by +-h, difference the scalar objective, and compare against the
gradient the tape reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    """Outcome of one gradient check."""

    passed: bool
    max_rel_error: float
    tol: float
    h: float
    worst_input: int = -1
    worst_coordinate: tuple[int, ...] = ()
    analytic: float = 0.0
    numeric: float = 0.0
    failure: str | None = None
    per_input_max: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        if self.failure:
            return f"gradcheck FAILED: {self.failure}"
        status = "passed" if self.passed else "FAILED"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e}) "
            f"at input {self.worst_input} coord {self.worst_coordinate} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})"
        )


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(*inputs)`` with central differences.

    ``f`` must return a scalar Tensor and be deterministic. All inputs must
    be float64; finite differences are unreliable in 32-bit. Relative error
    per coordinate is |a - n| / max(|a|, |n|, 1e-8); the check passes when
    the maximum over all coordinates is <= tol.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step size h={h} outside the supported range [1e-6, 1e-4]")
    inputs = list(inputs)
    for idx, t in enumerate(inputs):
        if t.data.dtype != np.float64:
            raise TypeError(f"gradcheck input {idx} must be float64, got {t.data.dtype}")
        t.requires_grad = True
        t.zero_grad()

    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"gradcheck objective must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, np.inf, tol, h, failure="objective is non-finite")
    out.backward()

    analytic = []
    for idx, t in enumerate(inputs):
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
            continue
        if not np.isfinite(t.grad).all():
            bad = np.argwhere(~np.isfinite(t.grad))[0]
            return GradCheckReport(
                False, np.inf, tol, h,
                worst_input=idx, worst_coordinate=tuple(int(c) for c in bad),
                failure=f"non-finite analytic gradient at input {idx} coord {tuple(int(c) for c in bad)}",
            )
        analytic.append(t.grad.copy())

    def eval_scalar() -> float:
        for t in inputs:
            t.zero_grad()
        return f(*inputs).item()

    report = GradCheckReport(True, 0.0, tol, h)
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        worst = 0.0
        for coord in range(flat.size):
            orig = flat[coord]
            flat[coord] = orig + h
            f_plus = eval_scalar()
            flat[coord] = orig - h
            f_minus = eval_scalar()
            flat[coord] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(numeric):
                report.passed = False
                report.failure = f"non-finite finite difference at input {idx} flat coord {coord}"
                report.worst_input = idx
                report.worst_coordinate = np.unravel_index(coord, t.shape)
                return report
            a = float(analytic[idx].reshape(-1)[coord])
            err = _rel_error(a, numeric)
            worst = max(worst, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_input = idx
                report.worst_coordinate = tuple(int(c) for c in np.unravel_index(coord, t.shape)) if t.ndim else ()
                report.analytic = a
                report.numeric = numeric
        report.per_input_max.append(worst)

    report.passed = report.max_rel_error <= tol
    return report
