"""Ready-made model configurations used by the demo scripts and tests.

The five-type family has one birth-rate-advantaged type, a shared baseline
death rate, and a Toeplitz transition matrix under which mutations between
nearby types are more likely. Interaction matrices are normalized to a
common Frobenius norm so the three interaction shapes are comparable:

    capacity   w proportional to the all-ones matrix J
               (death rates rise with expected total size),
    diag       w proportional to I
               (each type suppressed only by its own abundance:
               negative frequency-dependent selection),
    mixed      w proportional to J - (3/5) I
               (cross-type suppression dominates: positive
               frequency-dependent selection).
"""

from __future__ import annotations

import numpy as np

from .model import ModelSpec

__all__ = ["interaction_matrix", "demo_spec", "INTERACTION_KINDS"]

INTERACTION_KINDS = ("none", "capacity", "diag", "mixed")


def interaction_matrix(kind: str, d: int, frobenius_norm: float = 0.01) -> np.ndarray:
    """Interaction matrix of the requested shape, scaled to the given
    Frobenius norm ("none" returns zeros)."""
    if kind == "none":
        return np.zeros((d, d))
    if kind == "capacity":
        base = np.ones((d, d))
    elif kind == "diag":
        base = np.eye(d)
    elif kind == "mixed":
        base = np.ones((d, d)) - 0.6 * np.eye(d)
    else:
        raise ValueError(f"unknown interaction kind {kind!r}; "
                         f"expected one of {INTERACTION_KINDS}")
    return frobenius_norm * base / np.linalg.norm(base)


def _toeplitz_rates(d: int) -> np.ndarray:
    # off-diagonal rate decays tenfold per step in type distance
    gamma = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            if i != j:
                gamma[i, j] = 0.1 * 10.0 ** (1 - abs(i - j))
    np.fill_diagonal(gamma, -gamma.sum(axis=1))
    return gamma


def demo_spec(interaction: str = "capacity", d: int = 5,
              frobenius_norm: float = 0.01) -> ModelSpec:
    """The d-type demo model: type 1 has elevated birth rate 1.5, all other
    types 1.0; shared death rate 0.5; Toeplitz transitions; unit expected
    initial count per type."""
    lam = np.ones(d)
    lam[0] = 1.5
    return ModelSpec(
        d=d,
        lam=lam,
        mu=np.full(d, 0.5),
        gamma=_toeplitz_rates(d),
        w=interaction_matrix(interaction, d, frobenius_norm),
        r0=np.ones(d),
    )


def logistic_spec(lam: float = 2.0, mu: float = 1.0, w: float = 0.01,
                  r0: float = 1.0) -> ModelSpec:
    """Single-type model whose moment equation is the logistic ODE with
    growth rate lam - mu and carrying capacity (lam - mu) / w."""
    return ModelSpec(d=1, lam=[lam], mu=[mu], gamma=[[0.0]], w=[[w]], r0=[r0])
