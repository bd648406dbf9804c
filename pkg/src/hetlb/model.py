"""Domain types for a heterogeneous server farm and its state descriptors.

A farm has ``M`` pools. Pool ``j`` holds ``N * gamma_j`` servers of speed
``mu_j``; speeds are strictly decreasing so pool 0 is the fastest. Two state
descriptors are used throughout the package:

* :class:`QueueState` -- per-server queue lengths (job in service included).
* :class:`TailMeasure` -- ``x[i, j]``, the fraction of pool-``j`` servers with
  at least ``i`` jobs, stored as an array whose row ``i - 1`` is level ``i``.

Pools and levels are 0-based in code (pool 0 is the fastest) and 1-based in
CSV/JSON output.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DepthExceeded,
    LambdaOutOfRange,
    NonIntegerPoolSize,
    PoolCountMismatch,
    SpecError,
    StateError,
    UnnormalizedCapacity,
    UnsortedSpeeds,
)

DEFAULT_DEPTH = 64
INTEGRALITY_TOL = 1e-9


@dataclass(frozen=True)
class PoolSpec:
    speed: float
    fraction: float

    def __post_init__(self):
        if not self.speed > 0:
            raise SpecError(f"pool speed must be positive, got {self.speed}")
        if not 0 < self.fraction <= 1:
            raise SpecError(f"pool fraction must lie in (0, 1], got {self.fraction}")


@dataclass(frozen=True)
class SystemSpec:
    pools: tuple[PoolSpec, ...]
    n_servers: int
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(self.pools))

    @classmethod
    def from_arrays(cls, speeds: Sequence[float], fractions: Sequence[float],
                    n_servers: int, lam: float, validate: bool = True) -> "SystemSpec":
        if len(speeds) != len(fractions):
            raise SpecError("speeds and fractions differ in length")
        spec = cls(tuple(PoolSpec(float(s), float(g)) for s, g in zip(speeds, fractions)),
                   int(n_servers), float(lam))
        return validate_spec(spec) if validate else spec

    @property
    def n_pools(self) -> int:
        return len(self.pools)

    @property
    def speeds(self) -> np.ndarray:
        return np.array([p.speed for p in self.pools], dtype=float)

    @property
    def fractions(self) -> np.ndarray:
        return np.array([p.fraction for p in self.pools], dtype=float)

    @property
    def pool_sizes(self) -> np.ndarray:
        return np.rint(self.fractions * self.n_servers).astype(np.int64)

    def with_lambda(self, lam: float) -> "SystemSpec":
        return validate_spec(SystemSpec(self.pools, self.n_servers, float(lam)))

    def with_size(self, n_servers: int) -> "SystemSpec":
        return validate_spec(SystemSpec(self.pools, int(n_servers), self.lam))


def validate_spec(spec: SystemSpec) -> SystemSpec:
    """Return ``spec`` unchanged if every farm invariant holds.

    Raises the error matching the first violated invariant, checked in the
    order: capacity normalisation, pool sizes, speed ordering, load.
    """
    if spec.n_servers < 1 or spec.n_pools < 1:
        raise SpecError("need at least one server and one pool")
    gam = spec.fractions
    mu = spec.speeds
    if abs(gam.sum() - 1.0) > INTEGRALITY_TOL:
        raise UnnormalizedCapacity(f"fractions sum to {gam.sum()!r}, expected 1")
    cap = float(np.dot(gam, mu))
    if abs(cap - 1.0) > INTEGRALITY_TOL:
        raise UnnormalizedCapacity(f"sum(gamma*mu) = {cap!r}, expected 1")
    for j, g in enumerate(gam):
        size = g * spec.n_servers
        if abs(size - round(size)) > INTEGRALITY_TOL or round(size) < 1:
            raise NonIntegerPoolSize(f"pool {j + 1}: N*gamma = {size!r} is not a positive integer")
    if np.any(np.diff(mu) >= 0):
        raise UnsortedSpeeds(f"speeds must be strictly decreasing, got {mu.tolist()}")
    if not 0 < spec.lam < 1:
        raise LambdaOutOfRange(f"lambda must lie in (0, 1), got {spec.lam}")
    return spec


def fig1_spec(n_servers: int = 1000, lam: float = 0.7) -> SystemSpec:
    """Two pools: a fifth of the servers at speed 2.5, the rest at 0.625."""
    return SystemSpec.from_arrays([2.5, 0.625], [0.2, 0.8], n_servers, lam)


def fig3b_spec(n_servers: int = 100, lam: float = 0.5) -> SystemSpec:
    """Two equal pools at speeds 4/3 and 2/3."""
    return SystemSpec.from_arrays([4 / 3, 2 / 3], [0.5, 0.5], n_servers, lam)


def single_pool_spec(n_servers: int = 1, lam: float = 0.5) -> SystemSpec:
    return SystemSpec.from_arrays([1.0], [1.0], n_servers, lam)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QueueState:
    """Per-server queue lengths, one integer array per pool."""

    queues: tuple[np.ndarray, ...]

    def __post_init__(self):
        qs = []
        for q in self.queues:
            arr = np.array(q, dtype=np.int64).reshape(-1)
            if np.any(arr < 0):
                raise StateError("queue lengths must be non-negative")
            qs.append(_readonly(arr))
        object.__setattr__(self, "queues", tuple(qs))

    @classmethod
    def empty(cls, spec: SystemSpec) -> "QueueState":
        return cls(tuple(np.zeros(n, dtype=np.int64) for n in spec.pool_sizes))

    @classmethod
    def uniform(cls, spec: SystemSpec, level: int) -> "QueueState":
        return cls(tuple(np.full(n, level, dtype=np.int64) for n in spec.pool_sizes))

    @classmethod
    def from_flat(cls, flat: Sequence[int], spec: SystemSpec) -> "QueueState":
        flat = np.asarray(flat, dtype=np.int64)
        bounds = np.concatenate([[0], np.cumsum(spec.pool_sizes)])
        if len(flat) != bounds[-1]:
            raise StateError(f"expected {bounds[-1]} queue lengths, got {len(flat)}")
        return cls(tuple(flat[bounds[j]:bounds[j + 1]] for j in range(spec.n_pools)))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.queues)

    def check(self, spec: SystemSpec) -> "QueueState":
        if len(self.queues) != spec.n_pools:
            raise PoolCountMismatch(f"state has {len(self.queues)} pools, spec has {spec.n_pools}")
        for j, (q, n) in enumerate(zip(self.queues, spec.pool_sizes)):
            if len(q) != n:
                raise StateError(f"pool {j + 1} has {len(q)} servers, spec says {n}")
        return self

    @property
    def total_jobs(self) -> int:
        return int(sum(int(q.sum()) for q in self.queues))

    @property
    def q_min(self) -> int:
        return int(min(int(q.min()) for q in self.queues))

    def busy_counts(self) -> np.ndarray:
        """``B_j``: servers with at least one job, per pool."""
        return np.array([int(np.count_nonzero(q)) for q in self.queues], dtype=np.int64)

    def idle_counts(self) -> np.ndarray:
        """``I_j``: empty servers, per pool."""
        return np.array([int(np.count_nonzero(q == 0)) for q in self.queues], dtype=np.int64)

    def fastest_min_pool(self) -> int:
        """Index of the fastest pool holding a globally shortest queue."""
        m = self.q_min
        return next(j for j, q in enumerate(self.queues) if int(q.min()) == m)

    def min_servers(self, j: int) -> np.ndarray:
        """Indices of the shortest queues inside pool ``j``."""
        q = self.queues[j]
        return np.flatnonzero(q == q.min())

    def leq(self, other: "QueueState") -> bool:
        return all(np.all(a <= b) for a, b in zip(self.queues, other.queues))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "k", "q"])
        for j, q in enumerate(self.queues):
            for k, v in enumerate(q):
                w.writerow([j + 1, k + 1, int(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "QueueState":
        rows = list(csv.DictReader(io.StringIO(text)))
        n_pools = max(int(r["j"]) for r in rows)
        pools: list[dict[int, int]] = [dict() for _ in range(n_pools)]
        for r in rows:
            pools[int(r["j"]) - 1][int(r["k"]) - 1] = int(r["q"])
        return cls(tuple(np.array([p[k] for k in range(len(p))]) for p in pools))


@dataclass(frozen=True)
class TailMeasure:
    """Tail fractions ``x[i, j]`` for levels ``1..depth``.

    ``values[i - 1, j]`` is the fraction of pool-``j`` servers with at least
    ``i`` jobs. Level 0 is implicitly 1 and levels above ``depth`` are 0.
    """

    values: np.ndarray
    integral_sizes: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1:
            raise StateError("tail measure needs a (depth, pools) array")
        if np.any(v < -INTEGRALITY_TOL) or np.any(v > 1 + INTEGRALITY_TOL):
            raise StateError("tail fractions must lie in [0, 1]")
        if np.any(np.diff(v, axis=0) > INTEGRALITY_TOL):
            raise StateError("tail fractions must be non-increasing in the level")
        if self.integral_sizes is not None:
            scaled = v * np.asarray(self.integral_sizes, dtype=float)
            if np.any(np.abs(scaled - np.rint(scaled)) > INTEGRALITY_TOL * np.maximum(1.0, scaled)):
                raise StateError("empirical tail measure is not integral")
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def zeros(cls, n_pools: int, depth: int = DEFAULT_DEPTH) -> "TailMeasure":
        return cls(np.zeros((depth, n_pools)))

    @classmethod
    def from_levels(cls, entries: dict[tuple[int, int], float], n_pools: int,
                    depth: int = DEFAULT_DEPTH) -> "TailMeasure":
        """Build from ``{(level, pool): x}`` with 1-based level and 0-based pool."""
        v = np.zeros((depth, n_pools))
        for (i, j), x in entries.items():
            v[i - 1, j] = x
        return cls(v)

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def n_pools(self) -> int:
        return self.values.shape[1]

    def x(self, i: int, j: int) -> float:
        """``x_{i,j}`` with the level-0 and beyond-depth conventions."""
        if i <= 0:
            return 1.0
        if i > self.depth:
            return 0.0
        return float(self.values[i - 1, j])

    def padded(self, depth: int) -> np.ndarray:
        if depth < self.depth:
            if np.any(self.values[depth:] != 0):
                raise DepthExceeded(f"cannot truncate a measure with mass above level {depth}")
            return self.values[:depth].copy()
        out = np.zeros((depth, self.n_pools))
        out[: self.depth] = self.values
        return out

    def with_depth(self, depth: int) -> "TailMeasure":
        return TailMeasure(self.padded(depth))

    def leq(self, other: "TailMeasure") -> bool:
        d = max(self.depth, other.depth)
        return bool(np.all(self.padded(d) <= other.padded(d)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "x"])
        for i in range(self.depth):
            for j in range(self.n_pools):
                w.writerow([i + 1, j + 1, repr(float(self.values[i, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TailMeasure":
        rows = list(csv.DictReader(io.StringIO(text)))
        depth = max(int(r["i"]) for r in rows)
        pools = max(int(r["j"]) for r in rows)
        v = np.zeros((depth, pools))
        for r in rows:
            v[int(r["i"]) - 1, int(r["j"]) - 1] = float(r["x"])
        return cls(v)

    def to_json(self) -> str:
        return json.dumps({"depth": self.depth, "pools": self.n_pools,
                           "x": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TailMeasure":
        obj = json.loads(text)
        v = np.array(obj["x"], dtype=float).reshape(obj["depth"], obj["pools"])
        return cls(v)


def tail_measure_from_queues(q: QueueState, spec: SystemSpec,
                             depth: int = DEFAULT_DEPTH) -> TailMeasure:
    """Empirical tail measure: ``x[i, j] = #{k : Q[k, j] >= i} / (N gamma_j)``."""
    q.check(spec)
    v = np.zeros((depth, spec.n_pools))
    levels = np.arange(1, depth + 1)
    for j, qj in enumerate(q.queues):
        if len(qj) and int(qj.max()) > depth:
            raise DepthExceeded(f"pool {j + 1} has a queue of {int(qj.max())} > depth {depth}")
        counts = np.bincount(qj, minlength=depth + 1)
        at_least = counts[::-1].cumsum()[::-1]
        v[:, j] = at_least[levels] / len(qj)
    return TailMeasure(v, integral_sizes=tuple(int(n) for n in spec.pool_sizes))


def scaled_tail_sums(x: TailMeasure, spec: SystemSpec) -> np.ndarray:
    """``v_n = sum_j gamma_j sum_{i >= n} x[i, j]`` for ``n = 1..depth``."""
    if x.n_pools != spec.n_pools:
        raise PoolCountMismatch("tail measure and spec disagree on the pool count")
    per_pool = x.values[::-1].cumsum(axis=0)[::-1]
    return per_pool @ spec.fractions


def l1_distance(a: TailMeasure, b: TailMeasure) -> tuple[float, float]:
    """Return ``(max_j sum_i |a - b|, sum_{i,j} |a - b|)``, zero-padding the shorter one."""
    if a.n_pools != b.n_pools:
        raise PoolCountMismatch(f"{a.n_pools} pools vs {b.n_pools} pools")
    d = max(a.depth, b.depth)
    diff = np.abs(a.padded(d) - b.padded(d))
    return float(diff.sum(axis=0).max()), float(diff.sum())


def sum_distance(a: TailMeasure, b: TailMeasure) -> float:
    return l1_distance(a, b)[1]


def stack_measures(measures: Iterable[TailMeasure]) -> np.ndarray:
    ms = list(measures)
    d = max(m.depth for m in ms)
    return np.stack([m.padded(d) for m in ms])


def mean_measure(measures: Iterable[TailMeasure]) -> TailMeasure:
    return TailMeasure(stack_measures(measures).mean(axis=0))


def is_close_integer(v: float, tol: float = INTEGRALITY_TOL) -> bool:
    return abs(v - round(v)) <= tol and math.isfinite(v)
