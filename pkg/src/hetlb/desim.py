"""Discrete-event simulation of the separate-queue farm, the pooled system and the M/M/N chain.

All three simulators use an aggregate exponential race: one arrival clock at
rate ``N * lam`` and one departure clock at the total busy service rate, with
the departing server picked proportionally to its speed. Time averages and
response times only cover the window that starts at the arrival numbered
``ceil(warmup_fraction * total_arrivals)``; a job's response time is counted
iff it arrived inside that window and finished before the run ended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _engine
from .errors import DepthExceeded, StateError
from .model import DEFAULT_DEPTH, QueueState, SystemSpec, TailMeasure, validate_spec
from .policy import PolicyId, PolicyKind, water_filling_busy
from .rng import kernel_seed

LEVEL_CAP = 1 << 15


@dataclass(frozen=True)
class SimConfig:
    spec: SystemSpec
    policy: PolicyId = PolicyId(PolicyKind.SA_JSQ)
    total_arrivals: int = 300_000
    warmup_fraction: float = 0.5
    seed: int = 0
    tail_depth: int = DEFAULT_DEPTH
    initial: Optional[QueueState] = None
    reference: Optional[TailMeasure] = None
    record_states: int = 0

    def __post_init__(self):
        if self.total_arrivals < 1:
            raise ValueError("total_arrivals must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.tail_depth < 1:
            raise ValueError("tail_depth must be >= 1")

    @property
    def warmup_index(self) -> int:
        return min(math.ceil(self.warmup_fraction * self.total_arrivals), self.total_arrivals - 1)


@dataclass
class RunMetrics:
    mean_response_time: float
    mean_jobs_scaled: float
    stationary_tail: Optional[TailMeasure]
    tail_probabilities: Optional[np.ndarray]
    event_count: int
    sim_time: float
    seed: int
    window: float = 0.0
    arrivals: int = 0
    completed: int = 0
    censored: int = 0
    response_time_var: float = float("nan")
    mean_distance: float = float("nan")
    max_queue: int = 0
    rate_gap_checks: int = 0
    rate_gap_failures: int = 0
    occupancy: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = field(default=None, repr=False)
    dwell: Optional[np.ndarray] = field(default=None, repr=False)
    final_state: Optional[np.ndarray] = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {
            "mean_response_time": self.mean_response_time,
            "mean_jobs_scaled": self.mean_jobs_scaled,
            "event_count": self.event_count,
            "sim_time": self.sim_time,
            "seed": self.seed,
            "window": self.window,
            "arrivals": self.arrivals,
            "completed": self.completed,
            "censored": self.censored,
            "mean_distance": self.mean_distance,
            "max_queue": self.max_queue,
            "rate_gap_checks": self.rate_gap_checks,
            "rate_gap_failures": self.rate_gap_failures,
        }
        if self.tail_probabilities is not None:
            out["tail_probabilities"] = self.tail_probabilities.tolist()
        return out


def _sizes_speeds(spec: SystemSpec):
    return spec.pool_sizes.astype(np.int64), spec.speeds.astype(np.float64)


def _policy_args(policy: PolicyId, spec: SystemSpec):
    policy.check(spec)
    d = np.zeros(spec.n_pools, np.int64)
    d[: len(policy.d)] = policy.d
    return int(policy.kind), d


def _initial(spec: SystemSpec, initial: Optional[QueueState]) -> np.ndarray:
    if initial is None:
        return np.zeros(spec.n_servers, np.int64)
    flat = initial.check(spec).flat().astype(np.int64)
    if flat.size and flat.max() > LEVEL_CAP:
        raise DepthExceeded(f"initial queue {flat.max()} exceeds the level cap {LEVEL_CAP}")
    return flat


def _reference(ref: Optional[TailMeasure], spec: SystemSpec) -> np.ndarray:
    if ref is None:
        return np.zeros((1, spec.n_pools))
    if ref.n_pools != spec.n_pools:
        raise StateError("reference measure has the wrong pool count")
    return np.ascontiguousarray(ref.values, dtype=np.float64)


def simulate_separate(cfg: SimConfig) -> RunMetrics:
    """Simulate the separate-queue farm under ``cfg.policy`` until the last arrival."""
    spec = validate_spec(cfg.spec)
    sizes, speeds = _sizes_speeds(spec)
    code, d = _policy_args(cfg.policy, spec)
    res = _engine.run_separate(
        sizes, speeds, spec.lam, code, d, _initial(spec, cfg.initial),
        int(cfg.total_arrivals), int(cfg.warmup_index), kernel_seed(cfg.seed), LEVEL_CAP,
        0.0, True, np.zeros(0), 1, _reference(cfg.reference, spec), int(cfg.record_states))
    (status, t_end, t_warm, events, arrivals, acc, jobs_acc, dist_acc, rt_sum, rt_sq, rt_n,
     post_arrivals, max_level, _, gap_checks, gap_fail, rec_q, rec_w, final_q) = res
    if status == _engine.ERR_LEVEL_OVERFLOW:
        raise DepthExceeded(f"a queue exceeded {LEVEL_CAP} jobs; the load is far beyond capacity")
    window = t_end - t_warm
    depth = max(cfg.tail_depth, int(max_level))
    if window > 0:
        tails = (acc[:, 1:depth + 1] / (window * sizes[:, None])).T
        jobs = jobs_acc / (window * spec.n_servers)
        dist = dist_acc / window if cfg.reference is not None else float("nan")
    else:
        tails = np.zeros((depth, spec.n_pools))
        jobs = 0.0
        dist = float("nan")
    tails = np.clip(tails, 0.0, 1.0)
    tails = np.minimum.accumulate(tails, axis=0)
    mrt = rt_sum / rt_n if rt_n else float("nan")
    var = rt_sq / rt_n - mrt * mrt if rt_n else float("nan")
    return RunMetrics(
        mean_response_time=float(mrt), mean_jobs_scaled=float(jobs),
        stationary_tail=TailMeasure(tails), tail_probabilities=tails.T.copy(),
        event_count=int(events), sim_time=float(t_end), seed=cfg.seed, window=float(window),
        arrivals=int(arrivals), completed=int(rt_n), censored=int(post_arrivals - rt_n),
        response_time_var=float(var), mean_distance=float(dist), max_queue=int(max_level),
        rate_gap_checks=int(gap_checks), rate_gap_failures=int(gap_fail),
        states=rec_q if cfg.record_states else None,
        dwell=rec_w if cfg.record_states else None, final_state=final_q)


def simulate_trajectory(spec: SystemSpec, policy: PolicyId, times: Sequence[float], seed: int,
                        initial: Optional[QueueState] = None,
                        depth: int = DEFAULT_DEPTH) -> np.ndarray:
    """Empirical tail measure sampled at ``times``; returns an array (len(times), depth, M)."""
    spec = validate_spec(spec)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise ValueError("sample times must be sorted and non-negative")
    sizes, speeds = _sizes_speeds(spec)
    code, d = _policy_args(policy, spec)
    t_max = float(times[-1]) if times.size else 0.0
    res = _engine.run_separate(
        sizes, speeds, spec.lam, code, d, _initial(spec, initial), 1, 0, kernel_seed(seed),
        LEVEL_CAP, max(t_max, 1e-300), False, times, int(depth), np.zeros((1, spec.n_pools)), 0)
    if res[0] == _engine.ERR_LEVEL_OVERFLOW:
        raise DepthExceeded(f"a queue exceeded {LEVEL_CAP} jobs")
    return res[13]


def _birth_death(spec: SystemSpec, death: np.ndarray, cfg: SimConfig, k0: int) -> RunMetrics:
    t_end, t_warm, events, arrivals, acc, _acc2, occ, _, _ = _engine.run_birth_death(
        spec.n_servers * spec.lam, death, int(k0), int(cfg.total_arrivals),
        int(cfg.warmup_index), kernel_seed(cfg.seed), 0.0, np.zeros(0))
    window = t_end - t_warm
    jobs = acc / (window * spec.n_servers) if window > 0 else 0.0
    return RunMetrics(
        mean_response_time=float(jobs / spec.lam), mean_jobs_scaled=float(jobs),
        stationary_tail=None, tail_probabilities=None, event_count=int(events),
        sim_time=float(t_end), seed=cfg.seed, window=float(window), arrivals=int(arrivals),
        occupancy=occ / window if window > 0 else occ)


def pooled_death_rates(spec: SystemSpec) -> np.ndarray:
    """Pooled-system service rate for ``0..N`` jobs (constant ``N`` beyond)."""
    return np.array([float(np.dot(spec.speeds, water_filling_busy(k, spec)))
                     for k in range(spec.n_servers + 1)])


def mmn_death_rates(spec: SystemSpec) -> np.ndarray:
    return np.arange(spec.n_servers + 1, dtype=float)


def simulate_pooled_jffs(cfg: SimConfig, z0: int = 0) -> RunMetrics:
    """Pooled central-queue system under JFFS.

    With exponential services and the fastest-free-server rule the busy
    vector is always the water-filling vector of the job count, so the
    system reduces to a birth-death chain on the total job count. The mean
    response time follows from Little's law.
    """
    spec = validate_spec(cfg.spec)
    return _birth_death(spec, pooled_death_rates(spec), cfg, z0)


def simulate_mmn(cfg: SimConfig, y0: int = 0) -> RunMetrics:
    """The M/M/N chain with arrival rate ``N * lam`` and unit-speed servers."""
    spec = validate_spec(cfg.spec)
    return _birth_death(spec, mmn_death_rates(spec), cfg, y0)


def estimate_tail_probabilities(metrics: RunMetrics, spec: SystemSpec) -> np.ndarray:
    """``P(Q >= l)`` per pool (rows) and level ``l = 1..depth`` (columns)."""
    if metrics.tail_probabilities is None or metrics.window <= 0:
        raise ValueError("run has no post-warmup separate-queue statistics")
    if metrics.tail_probabilities.shape[0] != spec.n_pools:
        raise StateError("metrics and spec disagree on the pool count")
    return metrics.tail_probabilities


def pool_metrics(runs: Sequence[RunMetrics]) -> RunMetrics:
    """Merge replications: window-weighted time averages, completion-weighted response times."""
    if not runs:
        raise ValueError("nothing to merge")
    w = np.array([r.window for r in runs])
    c = np.array([r.completed for r in runs], dtype=float)
    wt = w / w.sum()
    mrt = float(np.dot(c, [r.mean_response_time for r in runs]) / c.sum()) if c.sum() else float(
        np.dot(wt, [r.mean_response_time for r in runs]))
    tails = None
    tail = None
    if all(r.tail_probabilities is not None for r in runs):
        depth = max(r.tail_probabilities.shape[1] for r in runs)
        stack = np.zeros((len(runs), runs[0].tail_probabilities.shape[0], depth))
        for k, r in enumerate(runs):
            stack[k, :, : r.tail_probabilities.shape[1]] = r.tail_probabilities
        tails = np.tensordot(wt, stack, axes=1)
        tail = TailMeasure(np.minimum.accumulate(np.clip(tails.T, 0, 1), axis=0))
    return replace(
        runs[0], mean_response_time=mrt,
        mean_jobs_scaled=float(np.dot(wt, [r.mean_jobs_scaled for r in runs])),
        stationary_tail=tail, tail_probabilities=tails,
        event_count=int(sum(r.event_count for r in runs)),
        sim_time=float(sum(r.sim_time for r in runs)), window=float(w.sum()),
        arrivals=int(sum(r.arrivals for r in runs)), completed=int(c.sum()),
        censored=int(sum(r.censored for r in runs)),
        mean_distance=float(np.dot(wt, [r.mean_distance for r in runs])),
        max_queue=max(r.max_queue for r in runs),
        rate_gap_checks=int(sum(r.rate_gap_checks for r in runs)),
        rate_gap_failures=int(sum(r.rate_gap_failures for r in runs)),
        states=None, dwell=None, final_state=None, occupancy=None)


def tail_csv(metrics: RunMetrics) -> str:
    """CSV of the stationary tail, columns (i, j, x)."""
    return metrics.stationary_tail.to_csv()


def trajectory_csv(times: Sequence[float], traj: np.ndarray) -> str:
    rows = ["t,j,i,x"]
    for t, x in zip(times, traj):
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                rows.append(f"{float(t)!r},{j + 1},{i + 1},{float(x[i, j])!r}")
    return "\n".join(rows) + "\n"
