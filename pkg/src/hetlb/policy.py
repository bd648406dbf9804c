"""Dispatch policies.

Separate-queue policies map a :class:`QueueState` and a caller-owned
``numpy.random.Generator`` to a :class:`DispatchDecision`. The pooled system
uses :func:`jffs_select`, which only needs per-pool busy counts.

Tie rules: SA-JSQ, SED and both sampling policies send cross-pool ties to the
fastest pool and then pick uniformly inside it; JSQ is uniform over every
minimal server.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DOutOfRange, NoIdleServer
from .model import QueueState, SystemSpec


class PolicyKind(IntEnum):
    SA_JSQ = 0
    JSQ = 1
    SED = 2
    SQ_D = 3
    SQ_D1_D2 = 4


@dataclass(frozen=True)
class DispatchDecision:
    pool: int
    server: int


@dataclass(frozen=True)
class PolicyId:
    kind: PolicyKind
    d: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == PolicyKind.SQ_D and (len(self.d) != 1 or self.d[0] < 1):
            raise DOutOfRange(f"SQ(d) needs a single d >= 1, got {self.d}")
        if self.kind == PolicyKind.SQ_D1_D2 and (
                not self.d or min(self.d) < 0 or sum(self.d) < 1):
            raise DOutOfRange(f"per-pool sample sizes must be >= 0 with a positive total, got {self.d}")

    @classmethod
    def parse(cls, text: str) -> "PolicyId":
        """Parse ``sa-jsq``, ``jsq``, ``sed``, ``sq:d=2`` or ``sq2:2,2``."""
        t = text.strip().lower()
        simple = {"sa-jsq": PolicyKind.SA_JSQ, "jsq": PolicyKind.JSQ, "sed": PolicyKind.SED}
        if t in simple:
            return cls(simple[t])
        m = re.fullmatch(r"sq:d=(\d+)", t)
        if m:
            return cls(PolicyKind.SQ_D, (int(m.group(1)),))
        m = re.fullmatch(r"sq2:(\d+(?:,\d+)*)", t)
        if m:
            return cls(PolicyKind.SQ_D1_D2, tuple(int(v) for v in m.group(1).split(",")))
        raise ValueError(f"unknown policy {text!r}")

    def __str__(self) -> str:
        if self.kind == PolicyKind.SQ_D:
            return f"sq:d={self.d[0]}"
        if self.kind == PolicyKind.SQ_D1_D2:
            return "sq2:" + ",".join(str(v) for v in self.d)
        return {PolicyKind.SA_JSQ: "sa-jsq", PolicyKind.JSQ: "jsq", PolicyKind.SED: "sed"}[self.kind]

    def check(self, spec: SystemSpec) -> "PolicyId":
        if self.kind == PolicyKind.SQ_D and self.d[0] > spec.n_servers:
            raise DOutOfRange(f"d={self.d[0]} exceeds N={spec.n_servers}")
        if self.kind == PolicyKind.SQ_D1_D2:
            if len(self.d) != spec.n_pools:
                raise DOutOfRange(f"need {spec.n_pools} per-pool sample sizes, got {len(self.d)}")
            if any(d > n for d, n in zip(self.d, spec.pool_sizes)):
                raise DOutOfRange(f"sample sizes {self.d} exceed pool sizes {spec.pool_sizes.tolist()}")
        return self


def _uniform_min(q: np.ndarray, idx: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform choice among ``idx`` entries attaining the minimum of ``q[idx]``."""
    vals = q[idx]
    cands = idx[vals == vals.min()]
    return int(cands[rng.integers(len(cands))]) if len(cands) > 1 else int(cands[0])


def sa_jsq_select(q: QueueState, rng: np.random.Generator) -> DispatchDecision:
    j = q.fastest_min_pool()
    cands = q.min_servers(j)
    return DispatchDecision(j, int(cands[rng.integers(len(cands))]))


def jsq_select(q: QueueState, rng: np.random.Generator) -> DispatchDecision:
    m = q.q_min
    counts = [int(np.count_nonzero(qj == m)) for qj in q.queues]
    r = int(rng.integers(sum(counts)))
    for j, c in enumerate(counts):
        if r < c:
            return DispatchDecision(j, int(np.flatnonzero(q.queues[j] == m)[r]))
        r -= c
    raise AssertionError("unreachable")


def sed_select(q: QueueState, spec: SystemSpec, rng: np.random.Generator) -> DispatchDecision:
    """Minimise ``Q / mu`` (queue length over speed); ties go to the fastest pool."""
    mu = spec.speeds
    ratios = [qj.min() / mu[j] for j, qj in enumerate(q.queues)]
    best = min(ratios)
    j = next(j for j, r in enumerate(ratios) if r <= best * (1 + 1e-12))
    cands = q.min_servers(j)
    return DispatchDecision(j, int(cands[rng.integers(len(cands))]))


def _fastest_min_among(q: QueueState, picks: list[np.ndarray],
                       rng: np.random.Generator) -> DispatchDecision:
    mins = [int(q.queues[j][p].min()) if len(p) else None for j, p in enumerate(picks)]
    best = min(m for m in mins if m is not None)
    j = next(j for j, m in enumerate(mins) if m == best)
    return DispatchDecision(j, _uniform_min(q.queues[j], picks[j], rng))


def sq_d_select(q: QueueState, d: int, rng: np.random.Generator) -> DispatchDecision:
    sizes = [len(qj) for qj in q.queues]
    n = sum(sizes)
    if not 1 <= d <= n:
        raise DOutOfRange(f"d={d} must lie in [1, {n}]")
    sample = rng.choice(n, size=d, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = [sample[(sample >= offsets[j]) & (sample < offsets[j + 1])] - offsets[j]
             for j in range(len(sizes))]
    return _fastest_min_among(q, picks, rng)


def sq_d1_d2_select(q: QueueState, d, rng: np.random.Generator) -> DispatchDecision:
    d = tuple(int(v) for v in d)
    if len(d) != len(q.queues) or sum(d) < 1 or any(
            not 0 <= dj <= len(qj) for dj, qj in zip(d, q.queues)):
        raise DOutOfRange(f"invalid per-pool sample sizes {d}")
    picks = [rng.choice(len(qj), size=dj, replace=False) if dj else np.empty(0, dtype=np.int64)
             for dj, qj in zip(d, q.queues)]
    return _fastest_min_among(q, picks, rng)


def select(policy: PolicyId, q: QueueState, spec: SystemSpec,
           rng: np.random.Generator) -> DispatchDecision:
    if policy.kind == PolicyKind.SA_JSQ:
        return sa_jsq_select(q, rng)
    if policy.kind == PolicyKind.JSQ:
        return jsq_select(q, rng)
    if policy.kind == PolicyKind.SED:
        return sed_select(q, spec, rng)
    if policy.kind == PolicyKind.SQ_D:
        return sq_d_select(q, policy.d[0], rng)
    return sq_d1_d2_select(q, policy.d, rng)


def jffs_select(busy, spec: SystemSpec) -> int:
    """Fastest pool that still has an idle server."""
    for j, (b, n) in enumerate(zip(busy, spec.pool_sizes)):
        if b < n:
            return j
    raise NoIdleServer("every server is busy")


def water_filling_busy(total: int, spec: SystemSpec) -> np.ndarray:
    """Busy counts ``(k - sum_{i<j} N gamma_i)_+ ^ N gamma_j`` for ``k`` jobs in the pooled system."""
    sizes = spec.pool_sizes
    before = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return np.minimum(np.maximum(total - before, 0), sizes)


def jffs_departure_rate(i: int, spec: SystemSpec) -> float:
    """Total service rate of the pooled system with ``i`` jobs."""
    if i < 0:
        raise ValueError("job count must be non-negative")
    return float(np.dot(spec.speeds, water_filling_busy(i, spec)))
