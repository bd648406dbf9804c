"""Lyapunov drifts, exponential tail majorants and the tightness statistic.

Drifts are exact generator values under SA-JSQ, recomputed from scratch for
every state. Batch versions take an integer array of flat states shaped
``(n_states, N)`` (pools concatenated fastest first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptySample, ThetaOutOfRange
from .model import QueueState, SystemSpec, TailMeasure


def _flat_speeds(spec: SystemSpec) -> np.ndarray:
    return np.repeat(spec.speeds, spec.pool_sizes)


def _as_batch(states, spec: SystemSpec) -> np.ndarray:
    if isinstance(states, QueueState):
        return states.check(spec).flat()[None, :].astype(float)
    a = np.asarray(states, dtype=float)
    return a[None, :] if a.ndim == 1 else a


def phi_drift_batch(states, spec: SystemSpec) -> np.ndarray:
    q = _as_batch(states, spec)
    mu = _flat_speeds(spec)
    n, lam = spec.n_servers, spec.lam
    return (2 * n * lam * q.min(axis=1) - 2 * q @ mu + n * lam + (q > 0) @ mu)


def phi_drift(q: QueueState, spec: SystemSpec) -> float:
    """Generator drift of the sum of squared queue lengths."""
    return float(phi_drift_batch(q, spec)[0])


def psi_drift_batch(states, theta: float, spec: SystemSpec) -> np.ndarray:
    q = _as_batch(states, spec)
    mu = _flat_speeds(spec)
    n, lam = spec.n_servers, spec.lam
    e = np.exp(theta * q)
    idle = (q == 0) @ mu
    return (math.expm1(theta) * (n * lam * np.exp(theta * q.min(axis=1))
                                 - math.exp(-theta) * (e @ mu) + math.exp(-theta) * idle))


def psi_drift(q: QueueState, theta: float, spec: SystemSpec) -> float:
    """Generator drift of the sum of ``exp(theta * Q)`` over all servers."""
    if theta < 0:
        raise ThetaOutOfRange("theta must be non-negative")
    return float(psi_drift_batch(q, theta, spec)[0])


def psi_drift_upper_bound_batch(states, theta: float, spec: SystemSpec) -> np.ndarray:
    # evaluated as the exact drift plus the non-negative slack
    # (1 - e^-theta) lam e^theta sum_k mu_k (e^{theta Q_k} - e^{theta Q_min}),
    # so the majorant holds in floating point and not just algebraically
    q = _as_batch(states, spec)
    mu = _flat_speeds(spec)
    slack = np.exp(theta * q) - np.exp(theta * q.min(axis=1))[:, None]
    gap = -math.expm1(-theta) * spec.lam * math.exp(theta) * (np.maximum(slack, 0.0) @ mu)
    return psi_drift_batch(q, theta, spec) + gap


def psi_drift_upper_bound_direct(states, theta: float, spec: SystemSpec) -> np.ndarray:
    """The majorant written term by term, for cross-checking."""
    q = _as_batch(states, spec)
    mu = _flat_speeds(spec)
    e = np.exp(theta * q)
    idle = (q == 0) @ mu
    return -math.expm1(-theta) * ((spec.lam * math.exp(theta) - 1) * (e @ mu) + idle)


def psi_drift_upper_bound(q: QueueState, theta: float, spec: SystemSpec) -> float:
    """Majorant of :func:`psi_drift` that replaces the minimum term by a weighted sum."""
    if theta < 0:
        raise ThetaOutOfRange("theta must be non-negative")
    return float(psi_drift_upper_bound_batch(q, theta, spec)[0])


def _check_theta(theta: float, lam: float) -> None:
    if not 0 < theta < -math.log(lam):
        raise ThetaOutOfRange(f"theta={theta} must lie in (0, {-math.log(lam):.6g})")


def mgf_bound(theta: float, j: int, spec: SystemSpec) -> float:
    """Bound on ``E[exp(theta * Q)]`` for a pool-``j`` server."""
    _check_theta(theta, spec.lam)
    mg = spec.speeds[j] * spec.fractions[j]
    return float((1 - spec.lam) / (mg * (1 - spec.lam * math.exp(theta))))


def tail_bound(l: int, theta: float, j: int, spec: SystemSpec) -> tuple[float, float]:
    """Return ``(C_j exp(-l theta), C_j)``; ``C_j`` doubles as the MGF bound."""
    if l < 1:
        raise ValueError("level must be >= 1")
    c = mgf_bound(theta, j, spec)
    return c * math.exp(-l * theta), c


def tail_sum_constant(theta: float, spec: SystemSpec) -> float:
    _check_theta(theta, spec.lam)
    lam = spec.lam
    inv = float(np.sum(1.0 / (spec.speeds * spec.fractions)))
    return (1 - lam) / ((1 - lam * math.exp(theta)) * -math.expm1(-theta)) * inv


def tail_sum_bound(l: int, theta: float, spec: SystemSpec) -> float:
    """Majorant ``C(theta) exp(-l theta)`` for the expected tail sums."""
    return tail_sum_constant(theta, spec) * math.exp(-l * theta)


def tightness_statistic(x: TailMeasure, l: int) -> float:
    """``max_j sum_{i >= l} x[i, j]``."""
    if l < 1:
        l = 1
    if l > x.depth:
        return 0.0
    return float(x.values[l - 1:].sum(axis=0).max())


def theta_grid(lam: float, base: Sequence[float] = (0.1, 0.25, 0.5)) -> list[float]:
    """Default grid restricted to the admissible interval ``(0, -ln lam)``."""
    top = -math.log(lam)
    return [t for t in base if t < top] + [0.9 * top]


@dataclass(frozen=True)
class DriftEstimate:
    value: float
    stderr: float
    n_states: int

    def __float__(self) -> float:
        return self.value


def stationary_drift_estimate(states, dwell, theta: float, spec: SystemSpec,
                              n_batches: int = 20) -> DriftEstimate:
    """Dwell-weighted mean of :func:`psi_drift` over visited states.

    ``stderr`` comes from batch means over ``n_batches`` consecutive blocks of
    the (time-ordered) sample.
    """
    if isinstance(states, (list, tuple)) and states and isinstance(states[0], QueueState):
        states = np.stack([s.check(spec).flat() for s in states])
    q = np.asarray(states)
    w = np.asarray(dwell, dtype=float)
    if q.size == 0 or w.sum() <= 0:
        raise EmptySample("no post-warmup states to average")
    if theta == 0:
        return DriftEstimate(0.0, 0.0, len(w))
    vals = np.empty(len(w))
    chunk = 50_000
    for s in range(0, len(w), chunk):
        vals[s:s + chunk] = psi_drift_batch(q[s:s + chunk], theta, spec)
    mean = float(np.dot(w, vals) / w.sum())
    b = min(n_batches, len(w))
    if b < 2:
        return DriftEstimate(mean, float("nan"), len(w))
    parts = np.array_split(np.arange(len(w)), b)
    means = np.array([np.dot(w[p], vals[p]) / w[p].sum() for p in parts])
    weights = np.array([w[p].sum() for p in parts])
    var = np.dot(weights, (means - mean) ** 2) / weights.sum()
    return DriftEstimate(mean, float(math.sqrt(var / (b - 1))), len(w))


def mm1_psi_drift_expectation(lam: float, theta: float) -> float:
    """Stationary mean of the exponential drift for the M/M/1 queue (unit speed).

    Evaluated term by term from the geometric law; it vanishes whenever the
    exponential moment is finite.
    """
    a = math.exp(theta)
    m = (1 - lam) / (1 - lam * a)
    busy = m - (1 - lam)
    return lam * (a - 1) * m - (1 - 1 / a) * busy


def bounds_csv(rows) -> str:
    """Rows of (l, theta, j, empirical, bound) as CSV."""
    out = ["l,theta,j,empirical,bound"]
    for l, th, j, emp, bnd in rows:
        out.append(f"{l},{float(th)!r},{j + 1},{float(emp)!r},{float(bnd)!r}")
    return "\n".join(out) + "\n"
