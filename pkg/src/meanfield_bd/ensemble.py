"""Exact stochastic simulation of the finite-N interacting ensemble.

N replica birth-death processes are advanced by one global Gillespie chain:
waiting times are exponential in the total rate, the event category (birth,
death, or mutation of some type) is drawn proportionally to its aggregate
rate, and the lineage is drawn proportionally to its type count through a
Fenwick tree over lineage-type pairs. Death rates couple the replicas
through the empirical mean S/N, so rates are refreshed from the per-type
totals after every event; the totals are integers and exact.

One simulation is single-threaded and fully determined by its seed;
parallelism belongs at the level of independent simulations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import ModelSpec, require_valid
from .scf import solve_moment_direct

__all__ = [
    "FenwickTree",
    "EnsembleState",
    "EnsembleTrace",
    "StudyRow",
    "RateOverflow",
    "EventBudgetExceeded",
    "CallbackRateError",
    "simulate",
    "simulate_general",
    "convergence_study",
    "export_trace_csv",
    "export_histograms_json",
]


class RateOverflow(RuntimeError):
    pass


class EventBudgetExceeded(RuntimeError):
    pass


class CallbackRateError(ValueError):
    """Raised when a rate callback returns an inadmissible rate; carries the
    offending state."""

    def __init__(self, message: str, state: tuple):
        super().__init__(f"{message} at state {state}")
        self.state = state


class FenwickTree:
    """Cumulative-frequency tree over integer weights, 0-indexed leaves.

    Supports point updates, prefix sums, and finding the first leaf whose
    cumulative sum exceeds a target, all in O(log n).
    """

    def __init__(self, size: int):
        self.size = size
        self._tree = [0] * (size + 1)
        self._log = 1
        while (self._log << 1) <= size:
            self._log <<= 1

    def add(self, index: int, delta: int) -> None:
        i = index + 1
        while i <= self.size:
            self._tree[i] += delta
            i += i & (-i)

    def prefix_sum(self, count: int) -> int:
        """Sum of the first ``count`` leaves."""
        s = 0
        i = count
        while i > 0:
            s += self._tree[i]
            i -= i & (-i)
        return s

    @property
    def total(self) -> int:
        return self.prefix_sum(self.size)

    def find(self, target: float) -> int:
        """Smallest leaf index with cumulative sum (strictly) > target."""
        pos = 0
        remaining = target
        step = self._log
        while step > 0:
            nxt = pos + step
            if nxt <= self.size and self._tree[nxt] <= remaining:
                pos = nxt
                remaining -= self._tree[nxt]
            step >>= 1
        return pos  # 0-based leaf index


@dataclass
class EnsembleState:
    """Mutable simulation state: counts is the flat type-major vector of
    z_{j,i} (leaf i*N + j of the Fenwick index), totals the per-type sums."""

    n_replicas: int
    d: int
    counts: list
    totals: list
    index: FenwickTree
    t: float
    rng: np.random.Generator

    def counts_matrix(self) -> np.ndarray:
        n, d = self.n_replicas, self.d
        out = np.empty((n, d), dtype=np.int64)
        for i in range(d):
            out[:, i] = self.counts[i * n:(i + 1) * n]
        return out

    def check_invariants(self) -> None:
        mat = self.counts_matrix()
        if mat.min() < 0:
            raise AssertionError("negative count")
        col = mat.sum(axis=0)
        for i in range(self.d):
            if int(col[i]) != self.totals[i]:
                raise AssertionError(
                    f"totals[{i}]={self.totals[i]} but column sum {int(col[i])}"
                )
            lo = self.index.prefix_sum(i * self.n_replicas)
            hi = self.index.prefix_sum((i + 1) * self.n_replicas)
            if hi - lo != self.totals[i]:
                raise AssertionError(f"fenwick slice {i} out of sync")


@dataclass(frozen=True)
class EnsembleTrace:
    """Checkpointed summary of one simulation: empirical means S/N, cumulative
    event counts by kind, and optionally the per-checkpoint histogram of
    replica states."""

    times: np.ndarray
    means: np.ndarray           # (len(times), d)
    births: np.ndarray
    deaths: np.ndarray
    mutations: np.ndarray
    n_replicas: int
    seed: int
    histograms: tuple | None = None   # tuple of dicts {state tuple: count}

    @property
    def total_events(self) -> int:
        if len(self.births) == 0:
            return 0
        return int(self.births[-1] + self.deaths[-1] + self.mutations[-1])


def _coerce_init(init, n: int, d: int) -> np.ndarray:
    arr = np.asarray(init)
    if arr.ndim == 1:
        if arr.shape != (d,):
            raise ValueError(f"shared initial state must have length {d}")
        arr = np.tile(arr, (n, 1))
    if arr.shape != (n, d):
        raise ValueError(f"init must have shape ({n}, {d}) or ({d},)")
    if np.any(arr < 0) or not np.all(np.isfinite(arr.astype(float))):
        raise ValueError("initial counts must be finite and >= 0")
    rounded = np.rint(arr).astype(np.int64)
    if np.any(np.abs(arr - rounded) > 1e-9):
        raise ValueError("initial counts must be integers")
    return rounded


def _checkpoint_array(checkpoints, tau: float) -> list:
    cp = [float(c) for c in checkpoints]
    if any(b <= a for a, b in zip(cp, cp[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    if cp and (cp[0] < 0.0 or cp[-1] > tau * (1.0 + 1e-12)):
        raise ValueError("checkpoints must lie in [0, tau]")
    return cp


def simulate(spec: ModelSpec, n_replicas: int, tau: float, init,
             seed: int, checkpoints: Sequence[float],
             max_events: int = 10_000_000,
             record_histogram: bool = False,
             debug_checks: bool = False) -> EnsembleTrace:
    """Exact Gillespie simulation of N replicas under the model's rates,
    with death rates evaluated at the empirical mean S/N.

    Deterministic for a fixed (spec, n_replicas, tau, init, seed,
    checkpoints) tuple. ``debug_checks`` revalidates the total-rate
    bookkeeping every 1000 events.
    """
    require_valid(spec)
    n = int(n_replicas)
    if n < 1:
        raise ValueError("n_replicas must be >= 1")
    tau = float(tau)
    if not tau > 0.0:
        raise ValueError("tau must be > 0")
    cp = _checkpoint_array(checkpoints, tau)
    init_mat = _coerce_init(init, n, spec.d)

    d = spec.d
    lam = [float(x) for x in spec.lam]
    mu = [float(x) for x in spec.mu]
    w_rows = [[float(x) for x in row] for row in spec.w]
    w_zero = not np.any(spec.w)
    cap = spec.interaction_cap
    mut_targets = []   # per source type: list of (target, rate)
    for i in range(d):
        row = [(k, float(spec.gamma[i, k]))
               for k in range(d) if k != i and spec.gamma[i, k] > 0.0]
        mut_targets.append(row)

    counts = [0] * (n * d)
    totals = [0] * d
    tree = FenwickTree(n * d)
    for j in range(n):
        for i in range(d):
            z = int(init_mat[j, i])
            if z:
                counts[i * n + j] = z
                totals[i] += z
                tree.add(i * n + j, z)

    state = EnsembleState(n, d, counts, totals, tree,
                          0.0, np.random.default_rng(seed))
    rng = state.rng

    rec_times, rec_means, rec_b, rec_d, rec_m = [], [], [], [], []
    histograms = [] if record_histogram else None
    births = deaths = mutations = 0
    cp_pos = 0

    def record_upto(limit: float, strict: bool) -> None:
        nonlocal cp_pos
        while cp_pos < len(cp) and (cp[cp_pos] < limit
                                    or (not strict and cp[cp_pos] <= limit)):
            rec_times.append(cp[cp_pos])
            rec_means.append([totals[i] / n for i in range(d)])
            rec_b.append(births)
            rec_d.append(deaths)
            rec_m.append(mutations)
            if record_histogram:
                histograms.append(_histogram(counts, n, d))
            cp_pos += 1

    events = 0
    while True:
        # aggregate per-type rates from the exact integer totals
        if w_zero:
            mu_t = mu
        else:
            scale = 1.0 / n
            total_mean = sum(totals) * scale
            if total_mean > cap:
                scale *= cap / total_mean
            mean = [totals_i * scale for totals_i in totals]
            mu_t = [mu[i] + sum(w_rows[i][j] * mean[j] for j in range(d))
                    for i in range(d)]
        lam_total = 0.0
        for i in range(d):
            si = totals[i]
            if si:
                lam_total += si * (lam[i] + mu_t[i]
                                   + sum(r for _, r in mut_targets[i]))
        if not math.isfinite(lam_total):
            raise RateOverflow(f"total rate is not finite at t={state.t:g}")
        if lam_total <= 0.0:
            record_upto(tau, strict=False)
            break

        dt = rng.exponential() / lam_total
        t_next = state.t + dt
        if t_next > tau:
            record_upto(tau, strict=False)
            break
        # checkpoints strictly before the event read the pre-event state;
        # a checkpoint exactly at the event time reads the post-event state
        record_upto(t_next, strict=True)

        if events >= max_events:
            raise EventBudgetExceeded(
                f"exceeded {max_events} events at t={state.t:g}"
            )
        u = rng.random() * lam_total
        etype = None
        for i in range(d):
            si = totals[i]
            if not si:
                continue
            r = si * lam[i]
            if u < r:
                etype = ("b", i, -1)
                break
            u -= r
            r = si * mu_t[i]
            if u < r:
                etype = ("d", i, -1)
                break
            u -= r
            for k, rate in mut_targets[i]:
                r = si * rate
                if u < r:
                    etype = ("m", i, k)
                    break
                u -= r
            if etype:
                break
        if etype is None:
            # numerical edge: u consumed the whole mass; take the last
            # admissible category
            for i in reversed(range(d)):
                if totals[i]:
                    etype = ("b", i, -1)
                    break

        kind, i, k = etype
        base = tree.prefix_sum(i * n)
        leaf = tree.find(base + rng.random() * totals[i])
        j = leaf - i * n

        if kind == "b":
            counts[leaf] += 1
            totals[i] += 1
            tree.add(leaf, 1)
            births += 1
        elif kind == "d":
            counts[leaf] -= 1
            totals[i] -= 1
            tree.add(leaf, -1)
            deaths += 1
        else:
            counts[leaf] -= 1
            totals[i] -= 1
            tree.add(leaf, -1)
            dst = k * n + j
            counts[dst] += 1
            totals[k] += 1
            tree.add(dst, 1)
            mutations += 1
        state.t = t_next
        events += 1
        if debug_checks and events % 1000 == 0:
            state.check_invariants()

    return EnsembleTrace(
        times=np.asarray(rec_times),
        means=np.asarray(rec_means) if rec_means else np.empty((0, d)),
        births=np.asarray(rec_b, dtype=np.int64),
        deaths=np.asarray(rec_d, dtype=np.int64),
        mutations=np.asarray(rec_m, dtype=np.int64),
        n_replicas=n,
        seed=int(seed),
        histograms=tuple(histograms) if record_histogram else None,
    )


def _histogram(counts: list, n: int, d: int) -> dict:
    hist: dict = {}
    for j in range(n):
        key = tuple(counts[i * n + j] for i in range(d))
        hist[key] = hist.get(key, 0) + 1
    return hist


class EmpiricalSummary:
    """Read-only view of the replica-state histogram handed to rate
    callbacks."""

    def __init__(self, histogram: dict, n_replicas: int, totals: list):
        self.histogram = MappingProxyType(histogram)
        self.n_replicas = n_replicas
        self._totals = totals

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self._totals, dtype=float) / self.n_replicas


def simulate_general(rates: Callable, n_replicas: int, tau: float, init,
                     seed: int, checkpoints: Sequence[float],
                     d: int | None = None,
                     max_events: int = 10_000_000,
                     record_histogram: bool = False) -> EnsembleTrace:
    """Exact simulation under caller-supplied rates.

    ``rates(y, summary)`` receives a state tuple and an
    :class:`EmpiricalSummary` and returns (birth[d], death[d], mutation[d][d])
    rate arrays; it is re-evaluated for every distinct state after every
    event, so the per-event cost is O(#distinct states * d) -- the price of
    full generality. Rates must be finite and nonnegative, and death and
    mutation rates must vanish on empty type slots; violations abort with
    the offending state.
    """
    n = int(n_replicas)
    if n < 1:
        raise ValueError("n_replicas must be >= 1")
    tau = float(tau)
    cp = _checkpoint_array(checkpoints, tau)

    init_arr = np.asarray(init)
    if d is None:
        d = init_arr.shape[-1]
    init_mat = _coerce_init(init, n, d)

    hist: dict = {}
    totals = [0] * d
    for j in range(n):
        key = tuple(int(v) for v in init_mat[j])
        hist[key] = hist.get(key, 0) + 1
        for i in range(d):
            totals[i] += key[i]

    rng = np.random.default_rng(seed)
    t = 0.0
    births = deaths = mutations = 0
    rec_times, rec_means, rec_b, rec_d, rec_m = [], [], [], [], []
    histograms = [] if record_histogram else None
    cp_pos = 0

    def record_upto(limit: float, strict: bool) -> None:
        nonlocal cp_pos
        while cp_pos < len(cp) and (cp[cp_pos] < limit
                                    or (not strict and cp[cp_pos] <= limit)):
            rec_times.append(cp[cp_pos])
            rec_means.append([totals[i] / n for i in range(d)])
            rec_b.append(births)
            rec_d.append(deaths)
            rec_m.append(mutations)
            if record_histogram:
                histograms.append(dict(hist))
            cp_pos += 1

    events = 0
    while True:
        summary = EmpiricalSummary(hist, n, totals)
        entries = []
        lam_total = 0.0
        for y, cnt in hist.items():
            b, dv, m = rates(y, summary)
            b = [float(x) for x in b]
            dv = [float(x) for x in dv]
            m = [[float(x) for x in row] for row in m]
            total_y = _validate_rates(y, b, dv, m, d)
            entries.append((y, cnt, b, dv, m, total_y))
            lam_total += cnt * total_y
        if not math.isfinite(lam_total):
            raise RateOverflow(f"total rate is not finite at t={t:g}")
        if lam_total <= 0.0:
            record_upto(tau, strict=False)
            break

        dt = rng.exponential() / lam_total
        t_next = t + dt
        if t_next > tau:
            record_upto(tau, strict=False)
            break
        record_upto(t_next, strict=True)
        if events >= max_events:
            raise EventBudgetExceeded(f"exceeded {max_events} events at t={t:g}")

        u = rng.random() * lam_total
        chosen = None
        for y, cnt, b, dv, m, total_y in entries:
            block = cnt * total_y
            if u >= block:
                u -= block
                continue
            u = u % total_y if total_y > 0.0 else 0.0
            for i in range(d):
                if u < b[i]:
                    chosen = (y, "b", i, -1)
                    break
                u -= b[i]
                if u < dv[i]:
                    chosen = (y, "d", i, -1)
                    break
                u -= dv[i]
                for k in range(d):
                    if k == i:
                        continue
                    if u < m[i][k]:
                        chosen = (y, "m", i, k)
                        break
                    u -= m[i][k]
                if chosen:
                    break
            if chosen is None:
                chosen = (y, "b", d - 1, -1)
            break
        if chosen is None:
            chosen = (entries[-1][0], "b", d - 1, -1)

        y, kind, i, k = chosen
        new = list(y)
        if kind == "b":
            new[i] += 1
            totals[i] += 1
            births += 1
        elif kind == "d":
            new[i] -= 1
            totals[i] -= 1
            deaths += 1
        else:
            new[i] -= 1
            new[k] += 1
            totals[i] -= 1
            totals[k] += 1
            mutations += 1
        if hist[y] == 1:
            del hist[y]
        else:
            hist[y] -= 1
        new_key = tuple(new)
        hist[new_key] = hist.get(new_key, 0) + 1
        t = t_next
        events += 1

    return EnsembleTrace(
        times=np.asarray(rec_times),
        means=np.asarray(rec_means) if rec_means else np.empty((0, d)),
        births=np.asarray(rec_b, dtype=np.int64),
        deaths=np.asarray(rec_d, dtype=np.int64),
        mutations=np.asarray(rec_m, dtype=np.int64),
        n_replicas=n,
        seed=int(seed),
        histograms=tuple(histograms) if record_histogram else None,
    )


def _validate_rates(y: tuple, b: list, dv: list, m: list, d: int) -> float:
    total = 0.0
    for i in range(d):
        if not (math.isfinite(b[i]) and b[i] >= 0.0):
            raise CallbackRateError(f"birth rate b[{i}]={b[i]!r} inadmissible", y)
        if not (math.isfinite(dv[i]) and dv[i] >= 0.0):
            raise CallbackRateError(f"death rate d[{i}]={dv[i]!r} inadmissible", y)
        if y[i] == 0 and dv[i] != 0.0:
            raise CallbackRateError(
                f"death rate d[{i}] must vanish when y[{i}]=0", y
            )
        total += b[i] + dv[i]
        for k in range(d):
            if k == i:
                continue
            r = m[i][k]
            if not (math.isfinite(r) and r >= 0.0):
                raise CallbackRateError(
                    f"mutation rate m[{i}][{k}]={r!r} inadmissible", y
                )
            if y[i] == 0 and r != 0.0:
                raise CallbackRateError(
                    f"mutation rate m[{i}][{k}] must vanish when y[{i}]=0", y
                )
            total += r
    return total


@dataclass(frozen=True)
class StudyRow:
    n_replicas: int
    mean_sup_error: float
    standard_error: float
    checkpoint_means: np.ndarray   # (seeds, checkpoints, d)


def convergence_study(spec: ModelSpec, ns: Sequence[int], tau: float,
                      seeds_per_n: int, checkpoints: Sequence[float] | None = None,
                      base_seed: int = 20_000_003,
                      init=None) -> list[StudyRow]:
    """Empirical convergence of the ensemble mean to the limiting moment
    trajectory as N grows.

    For each N, runs ``seeds_per_n`` independent simulations and reports the
    mean (over seeds) of the sup-over-checkpoints infinity-norm error
    against the direct moment solution, with its Monte-Carlo standard error.
    """
    ns = [int(x) for x in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("ns must be increasing")
    if checkpoints is None:
        checkpoints = np.linspace(0.0, tau, 11)[1:]
    cp = list(checkpoints)
    if init is None:
        init = np.rint(spec.r0)
        if np.any(np.abs(init - spec.r0) > 1e-9):
            raise ValueError(
                "r0 is not integral; pass an explicit per-replica init"
            )
    oracle = solve_moment_direct(spec, tau)
    target = np.stack([oracle(t) for t in cp], axis=0)   # (m, d)

    rows = []
    for ni, n in enumerate(ns):
        sups = np.empty(seeds_per_n)
        means = np.empty((seeds_per_n, len(cp), spec.d))
        for s in range(seeds_per_n):
            trace = simulate(spec, n, tau, init,
                             seed=base_seed + 7919 * ni + s, checkpoints=cp)
            means[s] = trace.means
            sups[s] = np.max(np.abs(trace.means - target))
        se = float(sups.std(ddof=1) / math.sqrt(seeds_per_n)) \
            if seeds_per_n > 1 else 0.0
        rows.append(StudyRow(n, float(sups.mean()), se, means))
    return rows


def export_trace_csv(trace: EnsembleTrace, fh) -> None:
    d = trace.means.shape[1] if trace.means.size else 0
    header = ["t"] + [f"mean_{i + 1}" for i in range(d)]
    header += ["events_birth", "events_death", "events_mutation"]
    fh.write(",".join(header) + "\n")
    for k, t in enumerate(trace.times):
        row = [format(float(t), ".17g")]
        row += [format(float(v), ".17g") for v in trace.means[k]]
        row += [str(int(trace.births[k])), str(int(trace.deaths[k])),
                str(int(trace.mutations[k]))]
        fh.write(",".join(row) + "\n")


def export_histograms_json(trace: EnsembleTrace, fh, indent: int | None = None
                           ) -> None:
    if trace.histograms is None:
        raise ValueError("trace was recorded without histograms")
    payload = [
        {
            "t": float(t),
            "histogram": {",".join(map(str, k)): v for k, v in h.items()},
        }
        for t, h in zip(trace.times, trace.histograms)
    ]
    json.dump(payload, fh, indent=indent)
