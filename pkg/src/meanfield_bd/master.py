"""Truncated Kolmogorov forward equation for the limiting state distribution.

The state lattice keeps every composition y in N_0^d with total count at
most kappa. States on the boundary shell (total exactly kappa) are frozen:
all their outgoing rates vanish, so probability parks there instead of
leaking, and total mass is conserved exactly. Death rates couple to the
first moment of the evolving distribution itself, which closes the system
into one finite nonlinear ODE integrated with the implicit (L-stable)
solver.
"""

from __future__ import annotations

import math
import os
from typing import Iterable, Mapping

import numpy as np
from scipy import sparse

from .model import ModelSpec, mu_tilde, require_valid
from .ode import DenseSolution, Tolerances, integrate

__all__ = [
    "TruncatedLattice",
    "DistributionTrajectory",
    "LatticeTooLarge",
    "solve_master",
    "moments",
    "export_distribution_csv",
    "DEFAULT_MAX_STATES",
]

DEFAULT_MAX_STATES = 2_000_000
MAX_STATES_ENV = "MFBD_MAX_STATES"


class LatticeTooLarge(ValueError):
    pass


def _lattice_size(kappa: int, d: int) -> int:
    return math.comb(kappa + d, d)


def _max_kappa(d: int, limit: int) -> int:
    k = 0
    while _lattice_size(k + 1, d) <= limit:
        k += 1
    return k


class TruncatedLattice:
    """Enumeration of {y in N_0^d : y_1 + ... + y_d <= kappa} with a
    bijective index.

    States are listed in graded lexicographic order (by total count, then
    lexicographically), so for d = 1 the index of state (n,) is simply n.
    """

    def __init__(self, d: int, kappa: int, max_states: int | None = None):
        if d < 1 or kappa < 1:
            raise ValueError("d and kappa must be positive integers")
        limit = _resolve_max_states(max_states)
        size = _lattice_size(kappa, d)
        if size > limit:
            raise LatticeTooLarge(
                f"lattice with d={d}, kappa={kappa} has {size} states, above "
                f"the limit {limit}; reduce kappa to at most "
                f"{_max_kappa(d, limit)} (or raise {MAX_STATES_ENV})"
            )
        self.d = d
        self.kappa = kappa
        states = []
        for total in range(kappa + 1):
            states.extend(_compositions(total, d))
        self.states = np.array(states, dtype=np.int64)
        self._index = {tuple(s): i for i, s in enumerate(states)}

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def index(self, state) -> int:
        key = tuple(int(v) for v in state)
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"state {key} not in lattice (kappa={self.kappa})") from None

    def __contains__(self, state) -> bool:
        return tuple(int(v) for v in state) in self._index

    def totals(self) -> np.ndarray:
        return self.states.sum(axis=1)


def _compositions(total: int, d: int):
    # all length-d nonnegative integer vectors summing to `total`, lex order
    if d == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, d - 1):
            yield (first,) + rest


def _resolve_max_states(max_states: int | None) -> int:
    if max_states is not None:
        return int(max_states)
    env = os.environ.get(MAX_STATES_ENV)
    return int(env) if env else DEFAULT_MAX_STATES


class DistributionTrajectory:
    """Time-indexed probability vectors over a truncated lattice."""

    def __init__(self, lattice: TruncatedLattice, dense: DenseSolution, tau: float):
        self.lattice = lattice
        self.dense = dense
        self.tau = float(tau)

    def distribution(self, t: float) -> np.ndarray:
        if not (0.0 <= t <= self.tau * (1.0 + 1e-12)):
            raise ValueError(f"t={t:g} outside [0, {self.tau:g}]")
        return self.dense(min(t, self.tau))

    def moments(self, t: float) -> np.ndarray:
        """Expected state vector sum_y y * v_y(t)."""
        v = self.distribution(t)
        return self.lattice.states.T.astype(float) @ v

    def total_mass(self, t: float) -> float:
        return float(self.distribution(t).sum())

    def tail_mass(self, t: float) -> float:
        """Probability parked on the frozen shell (total count == kappa)."""
        v = self.distribution(t)
        return float(v[self.lattice.totals() == self.lattice.kappa].sum())


def moments(traj: DistributionTrajectory, t: float) -> np.ndarray:
    return traj.moments(t)


def _forward_operators(spec: ModelSpec, lattice: TruncatedLattice):
    """Constant part of the forward operator plus per-type unit-rate death
    operators.

    Returns (l_const, deaths) with v' = l_const v + sum_i c_i(v) deaths[i] v,
    where c_i(v) is the moment-dependent part of the type-i death rate.
    Rows with total count == kappa contribute no outgoing rate.
    """
    n, d = lattice.size, lattice.d
    states = lattice.states
    totals = lattice.totals()
    active = totals < lattice.kappa
    idx = lattice._index

    rows_c, cols_c, vals_c = [], [], []
    death_parts = []

    def add(rows, cols, vals, src, dst, rate):
        rows.append(dst)
        cols.append(src)
        vals.append(rate)
        rows.append(src)
        cols.append(src)
        vals.append(-rate)

    for src in range(n):
        if not active[src]:
            continue  # frozen shell: no outgoing rates at all
        y = states[src]
        for i in range(d):
            yi = int(y[i])
            if yi == 0:
                continue
            # birth i: y -> y + e_i (stays inside since total < kappa)
            rate = yi * spec.lam[i]
            if rate > 0.0:
                key = list(y)
                key[i] += 1
                add(rows_c, cols_c, vals_c, src, idx[tuple(key)], rate)
            # mutations i -> k
            for k in range(d):
                if k == i:
                    continue
                rate = yi * spec.gamma[i, k]
                if rate > 0.0:
                    key = list(y)
                    key[i] -= 1
                    key[k] += 1
                    add(rows_c, cols_c, vals_c, src, idx[tuple(key)], rate)

    for i in range(d):
        rows_d, cols_d, vals_d = [], [], []
        for src in range(n):
            if not active[src]:
                continue
            yi = int(states[src][i])
            if yi == 0:
                continue
            key = list(states[src])
            key[i] -= 1
            add(rows_d, cols_d, vals_d, src, idx[tuple(key)], float(yi))
        death_parts.append(
            sparse.csr_matrix(
                (vals_d, (rows_d, cols_d)), shape=(n, n), dtype=float
            )
        )

    l_const = sparse.csr_matrix((vals_c, (rows_c, cols_c)), shape=(n, n), dtype=float)
    for i in range(d):
        l_const = l_const + spec.mu[i] * death_parts[i]
    return l_const.tocsr(), death_parts


def _coerce_v0(v0, lattice: TruncatedLattice) -> np.ndarray:
    if isinstance(v0, Mapping):
        vec = np.zeros(lattice.size)
        for state, p in v0.items():
            vec[lattice.index(state)] = float(p)
    else:
        vec = np.asarray(v0, dtype=float)
        if vec.shape != (lattice.size,):
            raise ValueError(
                f"v0 must have length {lattice.size} (lattice size), got {vec.shape}"
            )
        vec = vec.copy()
    if np.any(vec < 0.0):
        raise ValueError("v0 must be entrywise >= 0")
    total = float(vec.sum())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"v0 must sum to 1, got {total!r}")
    return vec


def solve_master(spec: ModelSpec, v0, kappa: int, tau: float,
                 tol: Tolerances | None = None,
                 max_states: int | None = None,
                 lattice: TruncatedLattice | None = None,
                 stiff: bool = True) -> DistributionTrajectory:
    """Integrate the kappa-truncated forward equation on [0, tau].

    ``v0`` is a probability vector over the lattice (or a mapping from state
    tuples to probabilities). The death rates are evaluated at the running
    first moment of the distribution, so the system is nonlinear but closed.
    Mass is conserved exactly by construction; probability that would flow
    past the truncation accumulates on the frozen shell instead.
    """
    require_valid(spec)
    if lattice is None:
        lattice = TruncatedLattice(spec.d, kappa, max_states=max_states)
    elif lattice.d != spec.d or lattice.kappa != kappa:
        raise ValueError("supplied lattice does not match spec.d and kappa")
    vec0 = _coerce_v0(v0, lattice)

    l_const, deaths = _forward_operators(spec, lattice)
    state_f = lattice.states.astype(float)          # (n, d)
    moment_rows = state_f.T                          # (d, n)
    interaction_grad = state_f @ spec.w.T            # (n, d): d c_i / d v_y

    def rhs(t, v):
        m = moment_rows @ v
        c = mu_tilde(spec, np.maximum(m, 0.0)) - spec.mu
        out = l_const @ v
        for i in range(spec.d):
            if c[i] != 0.0:
                out = out + c[i] * (deaths[i] @ v)
        return out

    def jac(t, v):
        m = moment_rows @ v
        c = mu_tilde(spec, np.maximum(m, 0.0)) - spec.mu
        total = l_const.copy()
        for i in range(spec.d):
            if c[i] != 0.0:
                total = total + c[i] * deaths[i]
        dense_jac = total.toarray()
        for i in range(spec.d):
            dv = deaths[i] @ v
            if np.any(dv):
                dense_jac += np.outer(dv, interaction_grad[:, i])
        return dense_jac

    dense = integrate(rhs, vec0, (0.0, tau), tol=tol, stiff=stiff,
                      jac=jac if stiff else None)
    return DistributionTrajectory(lattice, dense, tau)


def export_distribution_csv(traj: DistributionTrajectory, fh,
                            times: Iterable[float],
                            threshold: float = 1e-12) -> None:
    """Write "t,y_1,...,y_d,prob" rows for probabilities >= threshold."""
    d = traj.lattice.d
    fh.write("t," + ",".join(f"y_{i + 1}" for i in range(d)) + ",prob\n")
    for t in times:
        v = traj.distribution(t)
        for row in np.flatnonzero(v >= threshold):
            state = traj.lattice.states[row]
            cells = [format(t, ".17g")]
            cells += [str(int(s)) for s in state]
            cells.append(format(v[row], ".17g"))
            fh.write(",".join(cells) + "\n")
