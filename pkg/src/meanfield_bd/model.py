"""Model parameterizations shared by the solvers and the simulator.

A model is a d-type birth-death process with per-particle birth rates
``lam``, baseline death rates ``mu``, a conservative type-transition rate
matrix ``gamma`` (rows sum to zero), and a nonnegative interaction matrix
``w`` that couples death rates to the expected state vector:

    mu_tilde(r) = mu + w @ r

with the linear term frozen once the expected total size exceeds
``interaction_cap``, which keeps all rates bounded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelSpec",
    "SamplingSpec",
    "Violation",
    "validate",
    "mu_tilde",
    "model_from_dict",
    "model_from_json",
    "model_to_dict",
    "model_to_json",
]

DEFAULT_INTERACTION_CAP = 1e9


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=float)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    a = a.copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model parameterization.

    ``gamma`` may be given with a zero diagonal, in which case the diagonal
    is filled so each row sums to zero. A nonzero diagonal is kept as given
    and checked by :func:`validate`.
    """

    d: int
    lam: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    w: np.ndarray
    r0: np.ndarray
    interaction_cap: float = DEFAULT_INTERACTION_CAP

    def __post_init__(self):
        d = int(self.d)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "lam", _as_array(self.lam, (d,), "lam"))
        object.__setattr__(self, "mu", _as_array(self.mu, (d,), "mu"))
        object.__setattr__(self, "r0", _as_array(self.r0, (d,), "r0"))
        object.__setattr__(self, "w", _as_array(self.w, (d, d), "w"))
        g = np.asarray(self.gamma, dtype=float).copy()
        if g.shape != (d, d):
            raise ValueError(f"gamma must have shape {(d, d)}, got {g.shape}")
        if np.all(np.diag(g) == 0.0):
            # diagonal is derived data: fill it so rows sum to zero
            np.fill_diagonal(g, 0.0)
            np.fill_diagonal(g, -g.sum(axis=1))
        g.flags.writeable = False
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "interaction_cap", float(self.interaction_cap))

    @property
    def growth_matrix(self) -> np.ndarray:
        """Coefficient matrix diag(lam - mu) + gamma^T of the interaction-free
        moment equation."""
        return np.diag(self.lam - self.mu) + self.gamma.T


@dataclass(frozen=True)
class SamplingSpec:
    """Observation model: present-day sampling probability ``rho`` and
    per-death fossilization probability ``sigma``."""

    rho: float
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "sigma", float(self.sigma))
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if not (0.0 <= self.sigma <= 1.0):
            raise ValueError(f"sigma must be in [0, 1], got {self.sigma}")


@dataclass(frozen=True)
class Violation:
    field: str
    reason: str

    def __str__(self):
        return f"{self.field}: {self.reason}"


_ROW_SUM_TOL = 1e-12


def validate(spec: ModelSpec) -> list[Violation]:
    """Check every model invariant; returns all violations (empty if valid).

    Violations are data, not failures: an invalid spec can be constructed
    and inspected, but the solvers require a clean bill.
    """
    out: list[Violation] = []
    if spec.d < 1:
        out.append(Violation("d", f"must be a positive integer, got {spec.d}"))
        return out

    for name in ("lam", "mu", "w", "r0"):
        a = getattr(spec, name)
        if not np.all(np.isfinite(a)):
            out.append(Violation(name, "contains non-finite entries"))
        elif np.any(a < 0.0):
            bad = np.argwhere(a < 0.0)[0]
            out.append(Violation(name, f"negative entry at index {tuple(bad)}"))

    g = spec.gamma
    if not np.all(np.isfinite(g)):
        out.append(Violation("gamma", "contains non-finite entries"))
    else:
        off = g[~np.eye(spec.d, dtype=bool)]
        if off.size and np.any(off < 0.0):
            out.append(Violation("gamma", "off-diagonal entries must be >= 0"))
        if np.any(np.diag(g) > 0.0):
            out.append(Violation("gamma", "diagonal entries must be <= 0"))
        scale = max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
        rows = g.sum(axis=1)
        if np.any(np.abs(rows) > _ROW_SUM_TOL * scale * spec.d):
            i = int(np.argmax(np.abs(rows)))
            out.append(Violation("gamma", f"row {i} sums to {rows[i]:g}, expected 0"))

    if np.all(np.isfinite(spec.r0)) and not np.any(spec.r0 > 0.0):
        out.append(Violation("r0", "must not be identically zero"))

    if not math.isfinite(spec.interaction_cap) or spec.interaction_cap <= 0.0:
        out.append(Violation("interaction_cap", "must be a positive finite real"))
    elif np.all(np.isfinite(spec.r0)) and spec.interaction_cap <= float(spec.r0.sum()):
        out.append(
            Violation(
                "interaction_cap",
                f"must exceed sum(r0) = {spec.r0.sum():g}, got {spec.interaction_cap:g}",
            )
        )
    return out


def require_valid(spec: ModelSpec) -> ModelSpec:
    """Raise ValueError listing all violations if the spec is invalid."""
    violations = validate(spec)
    if violations:
        raise ValueError(
            "invalid model spec: " + "; ".join(str(v) for v in violations)
        )
    return spec


def mu_tilde(spec: ModelSpec, r: np.ndarray) -> np.ndarray:
    """Interacting death rates mu + w @ r, with r rescaled onto the cap.

    When total(r) exceeds ``interaction_cap`` the argument is rescaled to
    r * cap/total(r) before applying w, so the map stays continuous and
    globally bounded.
    """
    r = np.asarray(r, dtype=float)
    if r.shape != (spec.d,):
        raise ValueError(f"r must have shape ({spec.d},), got {r.shape}")
    total = float(r.sum())
    if total > spec.interaction_cap:
        r = r * (spec.interaction_cap / total)
    return spec.mu + spec.w @ r


# --- JSON wire format -------------------------------------------------------
#
# {"d": int, "lambda": [...], "mu": [...], "gamma": [[...]], "w": [[...]],
#  "r0": [...], "interaction_cap": float}
# Matrices are row-major nested lists. NaN/Infinity tokens are rejected.


def _reject_constant(token):
    raise ValueError(f"non-finite number {token!r} not allowed in model JSON")


def model_from_dict(obj: dict) -> ModelSpec:
    try:
        d = int(obj["d"])
        lam = obj["lambda"]
        mu = obj["mu"]
        gamma = obj["gamma"]
        w = obj["w"]
        r0 = obj["r0"]
    except KeyError as e:
        raise ValueError(f"model JSON missing required key {e.args[0]!r}") from None
    cap = float(obj.get("interaction_cap", DEFAULT_INTERACTION_CAP))
    spec = ModelSpec(d=d, lam=lam, mu=mu, gamma=gamma, w=w, r0=r0, interaction_cap=cap)
    for name in ("lam", "mu", "gamma", "w", "r0"):
        if not np.all(np.isfinite(getattr(spec, name))):
            raise ValueError(f"model JSON field {name!r} has non-finite entries")
    return spec


def model_from_json(text: str) -> ModelSpec:
    obj = json.loads(text, parse_constant=_reject_constant)
    if not isinstance(obj, dict):
        raise ValueError("model JSON must be an object")
    return model_from_dict(obj)


def model_to_dict(spec: ModelSpec) -> dict:
    return {
        "d": spec.d,
        "lambda": spec.lam.tolist(),
        "mu": spec.mu.tolist(),
        "gamma": spec.gamma.tolist(),
        "w": spec.w.tolist(),
        "r0": spec.r0.tolist(),
        "interaction_cap": spec.interaction_cap,
    }


def model_to_json(spec: ModelSpec, indent: int | None = None) -> str:
    return json.dumps(model_to_dict(spec), indent=indent, allow_nan=False)
