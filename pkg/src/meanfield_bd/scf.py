"""Moment trajectories, self-consistent fields, and steady states.

The central object is the moment map T: given an external field phi on
[0, tau], solve the linear system

    r' = (diag(lam - mu_tilde(phi(t))) + gamma^T) r,   r(0) = r0,

and return the trajectory r. A self-consistent field is a fixed point
phi = T[phi]; it is computed by Picard iteration from the constant field
r0, stopping when the summed per-component L2 trajectory distance between
successive iterates drops below delta. The nonlinear moment equation
(replacing phi with r itself) can also be integrated directly, which serves
as an independent cross-check of the fixed point.

Steady states solve the criticality condition

    (diag(lam - mu - w phi) + gamma^T) phi = 0

by damped Newton iteration from a set of initial guesses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, NamedTuple

import numpy as np
from scipy.interpolate import CubicSpline

from .model import ModelSpec, mu_tilde, require_valid
from .ode import DenseSolution, Tolerances, integrate

__all__ = [
    "FieldTrajectory",
    "ScfConfig",
    "ScfResult",
    "ScfNonConvergence",
    "moment_map",
    "solve_moment_direct",
    "solve_scf",
    "steady_states",
    "l2_trajectory_distance",
    "export_trajectory_csv",
    "steady_states_to_json",
]


class FieldTrajectory:
    """Dense nonnegative vector-valued function of time on [0, tau].

    Backed either by a constant vector or by a dense ODE solution. Dense
    solutions are evaluated through a piecewise-cubic interpolant built on
    the solver knots, their midpoints, and a uniform refinement, which makes
    pointwise evaluation cheap inside integrator callbacks; the backing
    :class:`DenseSolution` remains available as ``.dense``. Values are
    clipped to be entrywise >= 0.
    """

    def __init__(self, tau: float, d: int, evaluator: Callable,
                 dense: DenseSolution | None = None):
        self.tau = float(tau)
        self.d = int(d)
        self._eval = evaluator
        self.dense = dense

    @classmethod
    def constant(cls, value, tau: float) -> "FieldTrajectory":
        v = np.asarray(value, dtype=float).copy()

        def ev(t):
            t = np.asarray(t, dtype=float)
            if t.ndim == 0:
                return v.copy()
            return np.tile(v[:, None], (1, t.size))

        return cls(tau, v.size, ev)

    @classmethod
    def from_dense(cls, dense: DenseSolution, uniform_floor: int = 2049
                   ) -> "FieldTrajectory":
        grid = np.union1d(
            np.linspace(dense.t_start, dense.t_end, uniform_floor),
            np.union1d(dense.knots, 0.5 * (dense.knots[:-1] + dense.knots[1:])),
        )
        # guard the spline against near-coincident abscissae
        keep = np.concatenate([[True], np.diff(grid) > 1e-12 * max(1.0, dense.t_end)])
        grid = grid[keep]
        spline = CubicSpline(grid, dense(grid), axis=1)
        return cls(dense.t_end, dense.n, spline, dense=dense)

    @classmethod
    def from_grid_values(cls, grid: np.ndarray, values: np.ndarray
                         ) -> "FieldTrajectory":
        spline = CubicSpline(grid, values, axis=1)
        return cls(float(grid[-1]), values.shape[0], spline)

    def __call__(self, t):
        """Evaluate at scalar t -> (d,) or array of times -> (d, m)."""
        return np.maximum(self._eval(t), 0.0)

    def values_on(self, grid: np.ndarray) -> np.ndarray:
        return self(np.asarray(grid, dtype=float))

    @property
    def terminal_value(self) -> np.ndarray:
        return self(self.tau)


@dataclass(frozen=True)
class ScfConfig:
    """Stopping rule and iteration limits for the self-consistent field loop.

    ``delta`` bounds the summed per-component L2 trajectory distance between
    an iterate and its image under the moment map; the norm is evaluated by
    trapezoid quadrature on a fixed uniform grid of ``grid_points`` points.
    """

    delta: float = 1e-6
    max_iters: int = 200
    grid_points: int = 512
    tol: Tolerances = dataclass_field(default_factory=Tolerances)
    # horizons with free-growth exponent above this use the direct nonlinear
    # solution as the starting iterate (see solve_scf)
    long_horizon_exponent: float = 25.0
    # residual blow-up factor that switches the loop to averaged iteration
    divergence_factor: float = 1e7

    def __post_init__(self):
        if not (self.delta > 0.0):
            raise ValueError("delta must be > 0")
        if self.max_iters < 1 or self.grid_points < 2:
            raise ValueError("max_iters >= 1 and grid_points >= 2 required")


class ScfResult(NamedTuple):
    field: FieldTrajectory
    iterations: int
    residual: float


class ScfNonConvergence(RuntimeError):
    """Raised when the field loop exhausts max_iters; carries the last
    iterate and its residual."""

    def __init__(self, field: FieldTrajectory, iterations: int, residual: float):
        super().__init__(
            f"self-consistent field loop did not reach tolerance after "
            f"{iterations} iterations (residual {residual:.3e})"
        )
        self.field = field
        self.iterations = iterations
        self.residual = residual


def l2_trajectory_distance(a: np.ndarray, b: np.ndarray, grid: np.ndarray) -> float:
    """Sum over components of the L2([0,tau]) distance, trapezoid rule.

    ``a`` and ``b`` are (d, m) arrays of values on ``grid``.
    """
    diff = a - b
    return float(sum(np.sqrt(np.trapezoid(diff[i] ** 2, grid))
                     for i in range(diff.shape[0])))


def moment_map(spec: ModelSpec, phi: FieldTrajectory, tau: float,
               tol: Tolerances | None = None) -> FieldTrajectory:
    """Apply the moment map: solve the field-linearized moment equation.

    Returns the trajectory r with r' = (diag(lam - mu_tilde(phi(t))) +
    gamma^T) r and r(0) = r0 on [0, tau].
    """
    if phi.tau < tau * (1.0 - 1e-12):
        raise ValueError(f"field defined on [0, {phi.tau:g}] but tau={tau:g}")
    lam, gamma_t = spec.lam, spec.gamma.T

    def rhs(t, r):
        return (lam - mu_tilde(spec, phi(t))) * r + gamma_t @ r

    dense = integrate(rhs, spec.r0, (0.0, tau), tol=tol)
    return FieldTrajectory.from_dense(dense)


def solve_moment_direct(spec: ModelSpec, tau: float,
                        tol: Tolerances | None = None) -> FieldTrajectory:
    """Integrate the nonlinear (Riccati-type) moment equation directly.

    The interaction is evaluated at the running solution itself:
    r' = (diag(lam - mu_tilde(r)) + gamma^T) r, r(0) = r0.
    """
    require_valid(spec)
    lam, gamma_t = spec.lam, spec.gamma.T

    def rhs(t, r):
        return (lam - mu_tilde(spec, np.maximum(r, 0.0))) * r + gamma_t @ r

    dense = integrate(rhs, spec.r0, (0.0, tau), tol=tol)
    return FieldTrajectory.from_dense(dense)


def growth_exponent(spec: ModelSpec, tau: float) -> float:
    """tau times the spectral abscissa of the interaction-free moment system;
    an upper bound on the log-scale the Picard iterates can reach."""
    abscissa = float(np.max(np.linalg.eigvals(spec.growth_matrix).real))
    return tau * max(abscissa, 0.0)


def solve_scf(spec: ModelSpec, tau: float,
              config: ScfConfig | None = None) -> ScfResult:
    """Compute a self-consistent field on [0, tau] by fixed-point iteration.

    Starts from the constant field r0 and repeatedly applies the moment map
    until the quadrature L2 residual between an iterate and its image drops
    to ``config.delta``; the returned field satisfies that bound (the final
    map application is the verification). If the residual blows up by
    ``config.divergence_factor`` the loop switches to averaged iteration
    phi <- (phi + T[phi]) / 2.

    For long horizons (free-growth exponent above
    ``config.long_horizon_exponent``) plain iteration amplifies solver noise
    through the transient of the iterated Volterra kernel faster than it
    contracts, so the loop is warm-started at the direct nonlinear solution
    instead; the stopping criterion is verified identically in that path.
    """
    config = config or ScfConfig()
    require_valid(spec)
    tau = float(tau)
    if not tau > 0.0:
        raise ValueError("tau must be > 0")
    grid = np.linspace(0.0, tau, config.grid_points)

    if growth_exponent(spec, tau) > config.long_horizon_exponent:
        return _solve_scf_warm(spec, tau, config, grid)

    phi = FieldTrajectory.constant(spec.r0, tau)
    phi_vals = phi.values_on(grid)
    first_residual = None
    averaged = False
    residual = np.inf
    for iteration in range(config.max_iters + 1):
        image = moment_map(spec, phi, tau, tol=config.tol)
        image_vals = image.values_on(grid)
        residual = l2_trajectory_distance(phi_vals, image_vals, grid)
        if residual <= config.delta:
            return ScfResult(phi, iteration, residual)
        if first_residual is None:
            first_residual = max(residual, config.delta)
        if not np.isfinite(residual) or (
            residual > config.divergence_factor * first_residual
        ):
            averaged = True
        if averaged:
            fine = _refined_grid(image, tau)
            blend = 0.5 * (phi.values_on(fine) + image.values_on(fine))
            phi = FieldTrajectory.from_grid_values(fine, blend)
        else:
            phi = image
        phi_vals = phi.values_on(grid)
    raise ScfNonConvergence(phi, config.max_iters, residual)


def _refined_grid(field: FieldTrajectory, tau: float) -> np.ndarray:
    if field.dense is not None:
        knots = field.dense.knots
        grid = np.union1d(np.linspace(0.0, tau, 2049),
                          np.union1d(knots, 0.5 * (knots[:-1] + knots[1:])))
        keep = np.concatenate([[True], np.diff(grid) > 1e-12 * max(1.0, tau)])
        return grid[keep]
    return np.linspace(0.0, tau, 4097)


def _solve_scf_warm(spec: ModelSpec, tau: float, config: ScfConfig,
                    grid: np.ndarray) -> ScfResult:
    # both the starting iterate and the verification map need error well
    # below delta over the whole horizon
    boost = Tolerances(
        rtol=min(config.tol.rtol, 1e-12),
        atol=min(config.tol.atol, 1e-14),
        max_steps=config.tol.max_steps,
    )
    last: tuple[FieldTrajectory, float] | None = None
    for attempt in range(3):
        phi = solve_moment_direct(spec, tau, tol=boost)
        image = moment_map(spec, phi, tau, tol=boost)
        residual = l2_trajectory_distance(
            phi.values_on(grid), image.values_on(grid), grid
        )
        if residual <= config.delta:
            return ScfResult(phi, attempt, residual)
        last = (phi, residual)
        boost = Tolerances(rtol=boost.rtol / 10.0, atol=boost.atol / 10.0,
                           max_steps=boost.max_steps)
    raise ScfNonConvergence(last[0], 3, last[1])


# --- steady states -----------------------------------------------------------


def _criticality_residual(spec: ModelSpec, phi: np.ndarray) -> np.ndarray:
    return (spec.lam - spec.mu - spec.w @ phi) * phi + spec.gamma.T @ phi


def _criticality_jacobian(spec: ModelSpec, phi: np.ndarray) -> np.ndarray:
    return (np.diag(spec.lam - spec.mu - spec.w @ phi)
            - phi[:, None] * spec.w + spec.gamma.T)


def steady_states(spec: ModelSpec, guesses: list | None = None,
                  diagnostics: list | None = None) -> list[np.ndarray]:
    """Nonnegative roots of the criticality condition, by damped Newton.

    Newton iterations run from each initial guess (default: 0, r0, and the
    tail of a short self-consistent-field run), with backtracking halving of
    the step when the residual does not decrease. Roots are kept when the
    residual infinity-norm is <= 1e-10 and all components are nonnegative;
    duplicates within 1e-8 are merged, and the trivial root 0 is always
    included. Guesses at which the Jacobian is singular are skipped and
    recorded in ``diagnostics`` if a list is supplied.
    """
    require_valid(spec)
    if guesses is None:
        guesses = _default_guesses(spec, diagnostics)
    else:
        guesses = [np.asarray(g, dtype=float) for g in guesses]
        for g in guesses:
            if g.shape != (spec.d,):
                raise ValueError(f"guess must have shape ({spec.d},)")
            if np.any(g < 0.0):
                raise ValueError("guesses must be entrywise >= 0")

    roots: list[np.ndarray] = [np.zeros(spec.d)]
    for guess in guesses:
        root = _newton(spec, guess, diagnostics)
        if root is None:
            continue
        if np.any(root < -1e-9):
            continue
        root = np.maximum(root, 0.0)
        if np.linalg.norm(_criticality_residual(spec, root), np.inf) > 1e-10:
            continue
        if all(np.linalg.norm(root - r, np.inf) > 1e-8 for r in roots):
            roots.append(root)
    roots.sort(key=lambda r: float(r.sum()))
    return roots


def _default_guesses(spec: ModelSpec, diagnostics: list | None) -> list[np.ndarray]:
    guesses = [spec.r0.copy()]
    abscissa = float(np.max(np.linalg.eigvals(spec.growth_matrix).real))
    if abscissa > 1e-9:
        tau_short = float(np.clip(12.0 / abscissa, 1.0, 60.0))
        try:
            result = solve_scf(
                spec, tau_short,
                ScfConfig(delta=1e-4, max_iters=150),
            )
            guesses.append(result.field.terminal_value)
        except (ScfNonConvergence, RuntimeError) as e:
            if diagnostics is not None:
                diagnostics.append(f"short field run for default guess failed: {e}")
    return guesses


def _newton(spec: ModelSpec, guess: np.ndarray,
            diagnostics: list | None) -> np.ndarray | None:
    x = guess.astype(float).copy()
    for _ in range(100):
        f = _criticality_residual(spec, x)
        norm = np.linalg.norm(f, np.inf)
        if norm <= 1e-13:
            return x
        jac = _criticality_jacobian(spec, x)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            if diagnostics is not None:
                diagnostics.append(
                    f"singular Jacobian at iterate {x.tolist()}; guess "
                    f"{guess.tolist()} skipped"
                )
            return None
        scale = 1.0
        for _ in range(40):
            trial = x + scale * step
            if np.linalg.norm(_criticality_residual(spec, trial), np.inf) < norm:
                break
            scale *= 0.5
        x = x + scale * step
        if not np.all(np.isfinite(x)):
            return None
    return x if np.linalg.norm(_criticality_residual(spec, x), np.inf) <= 1e-10 else None


# --- exports -----------------------------------------------------------------


def export_trajectory_csv(field: FieldTrajectory, fh, resolution: int) -> None:
    """Write "t,r_1,...,r_d" rows on a uniform grid of ``resolution`` points.

    Floats are printed with 17 significant digits, so re-reading the file
    reproduces the evaluated values bit-exactly.
    """
    grid = np.linspace(0.0, field.tau, int(resolution))
    values = field.values_on(grid)
    fh.write("t," + ",".join(f"r_{i + 1}" for i in range(field.d)) + "\n")
    for k, t in enumerate(grid):
        row = [format(t, ".17g")] + [format(v, ".17g") for v in values[:, k]]
        fh.write(",".join(row) + "\n")


def steady_states_to_json(roots: list[np.ndarray], indent: int | None = None) -> str:
    return json.dumps([r.tolist() for r in roots], indent=indent)
