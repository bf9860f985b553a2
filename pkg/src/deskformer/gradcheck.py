"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, kink_monitor, no_grad

REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL_GRAD = 1e-6


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    skipped: int
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def checked(self) -> int:
        return sum(p.checked for p in self.params)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    def summary(self) -> str:
        return (
            f"{'PASS' if self.passed else 'FAIL'} max_rel={self.max_rel_error:.3e} "
            f"checked={self.checked} skipped={self.skipped}"
        )


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    epsilon: float = 1e-6,
    tolerance: float = REL_TOL,
    abs_tolerance: float = ABS_TOL,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` must rebuild its output from the current contents of ``params`` on
    every call. A coordinate is skipped when the relu/abs sign pattern seen at
    ``p + epsilon`` or ``p - epsilon`` differs from the one at ``p``: the
    function has a kink inside the stencil and the difference quotient means
    nothing there. Entries whose analytic gradient is below 1e-6 in magnitude
    are judged by absolute error instead of relative error.

    ``max_coords`` caps the number of coordinates tested per parameter (a
    seeded random subset); ``None`` checks all of them.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    named = params.items() if isinstance(params, dict) else (
        (f"param{i}", p) for i, p in enumerate(params)
    )
    named = list(named)
    tensors = [p for _, p in named]

    with kink_monitor() as base_pattern:
        loss = f()
    backward(loss, params=tensors)
    analytic = [p.grad.copy() for p in tensors]

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for (name, p), g in zip(named, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        max_rel = max_abs = 0.0
        checked = skipped = 0
        ok = True
        gflat = g.reshape(-1)
        for k in coords:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + epsilon
                with kink_monitor() as pat_plus:
                    f_plus = float(f().data)
                flat[k] = orig - epsilon
                with kink_monitor() as pat_minus:
                    f_minus = float(f().data)
            flat[k] = orig
            if not (_same_pattern(base_pattern, pat_plus) and _same_pattern(base_pattern, pat_minus)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(numeric - gflat[k])
            checked += 1
            max_abs = max(max_abs, err)
            if abs(gflat[k]) < SMALL_GRAD:
                ok &= err <= abs_tolerance
            else:
                rel = err / max(abs(gflat[k]), abs(numeric))
                max_rel = max(max_rel, rel)
                ok &= rel <= tolerance
        report.params.append(ParamReport(name, max_rel, max_abs, checked, skipped, bool(ok)))
    return report
