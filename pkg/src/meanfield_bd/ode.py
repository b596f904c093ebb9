"""Adaptive initial-value integration with dense (continuously evaluable) output.

Two embedded pairs are provided: an explicit Runge-Kutta 5(4) pair for
nonstiff systems and an L-stable implicit Radau IIA 5th-order pair for stiff
ones (``stiff=True``). Both control local error to atol + rtol*|y| per
component and carry per-step interpolants of order >= 3, so solutions can be
evaluated anywhere on the span. The driver loop is owned here so that step
budgets, step-size underflow, and non-finite right-hand sides are reported
with the time of failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import OdeSolution
from scipy.integrate import RK45, Radau

__all__ = [
    "Tolerances",
    "DenseSolution",
    "integrate",
    "OdeError",
    "StepCountExceeded",
    "StepSizeUnderflow",
    "RhsNotFinite",
]


@dataclass(frozen=True)
class Tolerances:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 100_000

    def __post_init__(self):
        for name in ("rtol", "atol"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if int(self.max_steps) < 1:
            raise ValueError("max_steps must be a positive integer")


class OdeError(RuntimeError):
    """Base class for integration failures; carries the time of failure."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (at t={t:.6g})")
        self.t = t


class StepCountExceeded(OdeError):
    pass


class StepSizeUnderflow(OdeError):
    pass


class RhsNotFinite(OdeError):
    pass


class DenseSolution:
    """Continuously evaluable solution on [t_start, t_end].

    Evaluation at accepted-step knots returns the stored step endpoints
    exactly; between knots the per-step interpolant is used.
    """

    def __init__(self, ts: np.ndarray, ys: np.ndarray, interp: OdeSolution):
        self._ts = ts
        self._ys = ys  # shape (n, len(ts))
        self._interp = interp
        self.n = ys.shape[0]

    @property
    def t_start(self) -> float:
        return float(self._ts[0])

    @property
    def t_end(self) -> float:
        return float(self._ts[-1])

    @property
    def knots(self) -> np.ndarray:
        return self._ts

    @property
    def knot_values(self) -> np.ndarray:
        """Array of shape (n, len(knots)): solution values at the knots."""
        return self._ys

    def __call__(self, t):
        """Evaluate at scalar t -> (n,) or at an array of times -> (n, m)."""
        scalar = np.isscalar(t) or np.ndim(t) == 0
        tq = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.t_start, self.t_end
        if np.any(tq < lo - 1e-12 * max(1.0, abs(lo))) or np.any(
            tq > hi + 1e-12 * max(1.0, abs(hi))
        ):
            raise ValueError(
                f"evaluation time outside [{lo:g}, {hi:g}]: {tq.min()}..{tq.max()}"
            )
        out = self._interp(np.clip(tq, lo, hi))
        # snap exact knot hits to the stored endpoint values
        idx = np.searchsorted(self._ts, tq)
        for k, (tk, j) in enumerate(zip(tq, idx)):
            if j < len(self._ts) and self._ts[j] == tk:
                out[:, k] = self._ys[:, j]
            elif j > 0 and self._ts[j - 1] == tk:
                out[:, k] = self._ys[:, j - 1]
        return out[:, 0] if scalar else out


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: Sequence[float],
    span: tuple[float, float],
    tol: Tolerances | None = None,
    stiff: bool = False,
    jac: Callable[[float, np.ndarray], np.ndarray] | None = None,
    max_step: float = np.inf,
    first_step: float | None = None,
) -> DenseSolution:
    """Integrate y' = rhs(t, y) over span = (t0, t1) with dense output.

    Raises StepCountExceeded, StepSizeUnderflow, or RhsNotFinite on failure,
    each annotated with the time reached.
    """
    tol = tol or Tolerances()
    t0, t1 = float(span[0]), float(span[1])
    if not t0 < t1:
        raise ValueError(f"span must satisfy t0 < t1, got ({t0}, {t1})")
    y0 = np.asarray(y0, dtype=float)

    def checked_rhs(t, y):
        dy = np.asarray(rhs(t, y), dtype=float)
        if not np.all(np.isfinite(dy)):
            raise RhsNotFinite("right-hand side returned non-finite values", t)
        return dy

    kwargs = dict(rtol=tol.rtol, atol=tol.atol, max_step=max_step)
    if first_step is not None:
        kwargs["first_step"] = first_step
    if stiff:
        solver = Radau(checked_rhs, t0, y0, t1, jac=jac, **kwargs)
    else:
        solver = RK45(checked_rhs, t0, y0, t1, **kwargs)

    ts = [t0]
    ys = [y0.copy()]
    interpolants = []
    while solver.status == "running":
        if len(interpolants) >= tol.max_steps:
            raise StepCountExceeded(
                f"exceeded {tol.max_steps} accepted steps", solver.t
            )
        solver.step()
        if solver.status == "failed":
            raise StepSizeUnderflow(
                "step size underflow: required step below floating-point "
                "resolution",
                solver.t,
            )
        if not np.all(np.isfinite(solver.y)):
            raise RhsNotFinite("solution became non-finite", solver.t)
        interpolants.append(solver.dense_output())
        ts.append(solver.t)
        ys.append(solver.y.copy())

    ts = np.asarray(ts)
    return DenseSolution(ts, np.stack(ys, axis=1), OdeSolution(ts, interpolants))
