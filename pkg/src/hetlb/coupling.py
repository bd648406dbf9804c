"""Paired simulations that keep two systems ordered on a common probability space.

Three constructions are provided:

* monotonicity -- two SA-JSQ farms with ordered initial queues, common
  uniformised departure marks and a shared arrival stream;
* dominance -- the pooled JFFS chain ``Z`` against a separate-queue farm ``R``
  under any policy, sharing arrivals and, whenever ``Z == R``, departures;
* M/M/N -- the pooled chain ``Z`` against the unit-speed M/M/N chain ``Y``,
  both embedded in one uniformising Poisson clock.

Each run checks the ordering after every event with exact integer
comparisons and counts violations. A clock with rate 0 never rings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from . import _engine
from .errors import BernoulliOutOfRange, InitialOrderViolated, NegativeRateGap
from .model import QueueState, SystemSpec, validate_spec
from .policy import PolicyId, PolicyKind, jffs_departure_rate  # noqa: F401  (re-export)
from .rng import kernel_seed

ERR_NONE = 0
ERR_NEGATIVE_GAP = 1
ERR_BERNOULLI = 2
GAP_TOL = 1e-9


@dataclass
class CouplingReport:
    kind: str
    events: int
    violations: int
    first_violation_time: Optional[float] = None
    violation_state: Optional[tuple] = None
    seed: int = 0
    sim_time: float = 0.0
    final: Optional[tuple] = field(default=None, repr=False)
    first_change: Optional[tuple] = None
    averages: Optional[tuple] = None

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def verdict(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        return f"{tag} {self.kind} seed={self.seed} events={self.events} violations={self.violations}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "events": self.events,
                "violations": self.violations, "first_violation_time": self.first_violation_time,
                "sim_time": self.sim_time}


def merge_reports(reports) -> CouplingReport:
    reports = list(reports)
    firsts = [r.first_violation_time for r in reports if r.first_violation_time is not None]
    return CouplingReport(
        kind=reports[0].kind, events=sum(r.events for r in reports),
        violations=sum(r.violations for r in reports),
        first_violation_time=min(firsts) if firsts else None,
        sim_time=sum(r.sim_time for r in reports))


@nb.njit(cache=True)
def _pool_rate_table(sizes, speeds):
    n = 0
    for j in range(sizes.shape[0]):
        n += sizes[j]
    out = np.zeros(n + 1)
    for k in range(n + 1):
        out[k] = _engine._water_rate(k, sizes, speeds)
    return out


# ---------------------------------------------------------------- monotonicity

@nb.njit(cache=True)
def _fastest_min_pool(q, offs, sizes):
    best = 0
    bq = np.int64(1) << 62
    for j in range(sizes.shape[0]):
        for k in range(offs[j], offs[j] + sizes[j]):
            if q[k] < bq:
                bq = q[k]
                best = j
    return best


@nb.njit(cache=True)
def _pool_min(q, lo, hi):
    m = q[lo]
    for k in range(lo + 1, hi):
        if q[k] < m:
            m = q[k]
    return m


@nb.njit(cache=True)
def _uniform_min(q, lo, hi):
    m = _pool_min(q, lo, hi)
    c = 0
    pick = -1
    for k in range(lo, hi):
        if q[k] == m:
            c += 1
            if np.random.randint(0, c) == 0:
                pick = k
    return pick


@nb.njit(cache=True)
def _monotone_kernel(sizes, speeds, lam, qs0, ql0, max_events, t_max, seed):
    np.random.seed(seed)
    M = sizes.shape[0]
    N = qs0.shape[0]
    offs = np.zeros(M, np.int64)
    for j in range(1, M):
        offs[j] = offs[j - 1] + sizes[j - 1]
    cum = np.zeros(M)
    acc = 0.0
    for j in range(M):
        acc += speeds[j] * sizes[j] / N
        cum[j] = acc
    qs = qs0.copy()
    ql = ql0.copy()
    t = 0.0
    events = 0
    violations = 0
    first_v = -1.0
    vs = qs.copy()
    vl = ql.copy()
    ch_s = -1.0
    ch_l = -1.0
    rate = N * (1.0 + lam)
    p_arr = lam / (1.0 + lam)
    while events < max_events:
        t_next = t + np.random.exponential(1.0 / rate)
        if t_max > 0.0 and t_next > t_max:
            t = t_max
            break
        t = t_next
        events += 1
        if np.random.random() < p_arr:
            js = _fastest_min_pool(qs, offs, sizes)
            jl = _fastest_min_pool(ql, offs, sizes)
            if js == jl:
                j = js
                ks = _uniform_min(qs, offs[j], offs[j] + sizes[j])
                if ql[ks] == _pool_min(ql, offs[j], offs[j] + sizes[j]):
                    kl = ks
                else:
                    kl = _uniform_min(ql, offs[j], offs[j] + sizes[j])
            else:
                ks = _uniform_min(qs, offs[js], offs[js] + sizes[js])
                kl = _uniform_min(ql, offs[jl], offs[jl] + sizes[jl])
            qs[ks] += 1
            ql[kl] += 1
            if ch_s < 0:
                ch_s = t
            if ch_l < 0:
                ch_l = t
            bad = qs[ks] > ql[ks] or qs[kl] > ql[kl]
        else:
            u = np.random.random() * cum[M - 1]
            j = 0
            while j < M - 1 and u >= cum[j]:
                j += 1
            k = offs[j] + np.random.randint(0, sizes[j])
            if qs[k] > 0:
                qs[k] -= 1
                if ch_s < 0:
                    ch_s = t
            if ql[k] > 0:
                ql[k] -= 1
                if ch_l < 0:
                    ch_l = t
            bad = qs[k] > ql[k]
        if bad:
            violations += 1
            if first_v < 0:
                first_v = t
                vs[:] = qs
                vl[:] = ql
    return events, violations, first_v, vs, vl, qs, ql, t, ch_s, ch_l


def coupled_monotonicity_run(spec: SystemSpec, q_small: QueueState, q_large: QueueState,
                             events: int, seed: int, t_max: float = 0.0) -> CouplingReport:
    """Two SA-JSQ farms started from ``q_small <= q_large``."""
    spec = validate_spec(spec)
    a = q_small.check(spec).flat().astype(np.int64)
    b = q_large.check(spec).flat().astype(np.int64)
    if np.any(a > b):
        raise InitialOrderViolated("q_small must be <= q_large component-wise")
    ev, viol, first, vs, vl, qs, ql, t, cs, cl = _monotone_kernel(
        spec.pool_sizes.astype(np.int64), spec.speeds, spec.lam, a, b, int(events),
        float(t_max), kernel_seed(seed))
    return CouplingReport(
        "monotonicity", int(ev), int(viol), None if first < 0 else float(first),
        None if first < 0 else (vs, vl), seed, float(t), (qs, ql),
        (None if cs < 0 else float(cs), None if cl < 0 else float(cl)))


# ---------------------------------------------------------------- dominance

@nb.njit(cache=True)
def _dominance_kernel(sizes, speeds, lam, policy, dvec, z0, q0, max_events, t_max, seed, tz,
                      warm_events):
    np.random.seed(seed)
    M = sizes.shape[0]
    N = q0.shape[0]
    offs = np.zeros(M, np.int64)
    for j in range(1, M):
        offs[j] = offs[j - 1] + sizes[j - 1]
    pool_of = np.empty(N, np.int64)
    for j in range(M):
        for k in range(sizes[j]):
            pool_of[offs[j] + k] = j
    lmax = 1 << 15
    q = q0.copy()
    order = np.empty(N, np.int64)
    pos = np.empty(N, np.int64)
    cnt = np.zeros((M, lmax + 2), np.int64)
    rtot = 0
    for j in range(M):
        blk = np.argsort(q[offs[j]:offs[j] + sizes[j]], kind="mergesort")
        for p in range(sizes[j]):
            g = offs[j] + blk[p]
            order[offs[j] + p] = g
            pos[g] = offs[j] + p
        for k in range(sizes[j]):
            v = q[offs[j] + k]
            rtot += v
            for u in range(v + 1):
                cnt[j, u] += 1
    perm = np.arange(N)
    z = z0
    lam_n = N * lam
    t = 0.0
    events = 0
    violations = 0
    first_v = -1.0
    vz = -1
    vr = -1
    err = ERR_NONE
    ch_z = -1.0
    ch_r = -1.0
    acc_z = 0.0
    acc_r = 0.0
    t_warm = 0.0
    while events < max_events:
        if events == warm_events:
            t_warm = t
        dr = 0.0
        for j in range(M):
            dr += speeds[j] * cnt[j, 1]
        dz = tz[min(z, N)]
        coupled = z == rtot
        if coupled:
            gap = dz - dr
            if gap < -GAP_TOL * max(1.0, dz):
                err = ERR_NEGATIVE_GAP
                break
            if gap < 0.0:
                gap = 0.0
            rate = lam_n + dr + gap
        else:
            rate = lam_n + dr + dz
        t_next = t + np.random.exponential(1.0 / rate)
        if t_max > 0.0 and t_next > t_max:
            t_next = t_max
        if events >= warm_events:
            acc_z += z * (t_next - t)
            acc_r += rtot * (t_next - t)
        if t_max > 0.0 and t_next >= t_max:
            t = t_max
            break
        t = t_next
        events += 1
        u = np.random.random() * rate
        r_departs = False
        if u < lam_n:
            z += 1
            g = _engine._dispatch(policy, dvec, q, order, cnt, sizes, offs, speeds, pool_of,
                                  perm, N)
            _engine._inc(g, q, order, pos, cnt, sizes, offs, pool_of)
            rtot += 1
            if ch_z < 0:
                ch_z = t
            if ch_r < 0:
                ch_r = t
        else:
            u -= lam_n
            if u < dr:
                r_departs = True
                if coupled:
                    # departure clock D: both systems lose a job
                    z -= 1
                    if ch_z < 0:
                        ch_z = t
            elif z > 0:
                # gap clock C when coupled, else the pooled chain's own clock
                z -= 1
                if ch_z < 0:
                    ch_z = t
            if r_departs:
                j = 0
                while j < M - 1 and u >= speeds[j] * cnt[j, 1]:
                    u -= speeds[j] * cnt[j, 1]
                    j += 1
                if cnt[j, 1] == 0:
                    j = M - 1
                    while cnt[j, 1] == 0:
                        j -= 1
                b = cnt[j, 1]
                g = order[offs[j] + sizes[j] - b + np.random.randint(0, b)]
                _engine._dec(g, q, order, pos, cnt, sizes, offs, pool_of)
                rtot -= 1
                if ch_r < 0:
                    ch_r = t
        if z > rtot:
            violations += 1
            if first_v < 0:
                first_v = t
                vz = z
                vr = rtot
    return (err, events, violations, first_v, vz, vr, z, q, t, ch_z, ch_r, acc_z, acc_r,
            t_warm)


def coupled_dominance_run(spec: SystemSpec, policy: PolicyId, events: int, seed: int,
                          z0: int = 0, r0: Optional[QueueState] = None,
                          t_max: float = 0.0, warmup_events: int = 0) -> CouplingReport:
    """Pooled JFFS chain against the separate-queue farm under ``policy``.

    ``report.averages`` holds the time averages of both job counts from
    event ``warmup_events`` on; by dominance the first never exceeds the second.
    """
    spec = validate_spec(spec)
    policy.check(spec)
    q0 = (np.zeros(spec.n_servers, np.int64) if r0 is None
          else r0.check(spec).flat().astype(np.int64))
    if z0 > int(q0.sum()):
        raise InitialOrderViolated("pooled job count must not exceed the separate system's")
    sizes = spec.pool_sizes.astype(np.int64)
    d = np.zeros(spec.n_pools, np.int64)
    d[: len(policy.d)] = policy.d
    err, ev, viol, first, vz, vr, z, q, t, cz, cr, az, ar, tw = _dominance_kernel(
        sizes, spec.speeds, spec.lam, int(policy.kind), d, int(z0), q0, int(events),
        float(t_max), kernel_seed(seed), _pool_rate_table(sizes, spec.speeds),
        int(warmup_events))
    if err == ERR_NEGATIVE_GAP:
        raise NegativeRateGap("separate-queue service rate exceeded the pooled rate")
    return CouplingReport(
        f"dominance[{policy}]", int(ev), int(viol), None if first < 0 else float(first),
        None if first < 0 else (int(vz), int(vr)), seed, float(t), (int(z), q),
        (None if cz < 0 else float(cz), None if cr < 0 else float(cr)),
        (az / (t - tw), ar / (t - tw)) if t > tw else None)


# ---------------------------------------------------------------- M/M/N

@nb.njit(cache=True)
def _step(u, p_up, p_dn):
    if u < p_up:
        return 1
    if u < p_up + p_dn:
        return -1
    return 0


@nb.njit(cache=True)
def _mmn_kernel(n, lam, tz, z0, y0, max_events, t_max, seed, literal):
    np.random.seed(seed)
    B = n * (lam + 1.0)
    p_up = n * lam / B
    # split mode: clock 2B, every tick belongs to Z or Y (each at rate B) unless
    # the chains are equal, in which case half of the ticks are joint steps
    clock = B if literal else 2.0 * B
    z = z0
    y = y0
    t = 0.0
    events = 0
    violations = 0
    first_v = -1.0
    vz = -1
    vy = -1
    err = ERR_NONE
    ch_z = -1.0
    ch_y = -1.0
    while events < max_events:
        t_next = t + np.random.exponential(1.0 / clock)
        if t_max > 0.0 and t_next > t_max:
            t = t_max
            break
        t = t_next
        events += 1
        pz_dn = tz[min(z, n)] / B
        py_dn = min(y, n) / B
        zstep = 0
        ystep = 0
        if z == y:
            if literal or np.random.random() < 0.5:
                ystep = _step(np.random.random(), p_up, py_dn)
                if ystep != 0:
                    zstep = ystep
                else:
                    py_stay = 1.0 - p_up - py_dn
                    theta = 0.0 if py_stay <= 0.0 else (pz_dn - py_dn) / py_stay
                    if theta < -1e-12 or theta > 1.0 + 1e-12:
                        err = ERR_BERNOULLI
                        break
                    zstep = -1 if np.random.random() < theta else 0
        elif literal:
            ystep = _step(np.random.random(), p_up, py_dn)
            zstep = _step(np.random.random(), p_up, pz_dn)
        elif np.random.random() < 0.5:
            ystep = _step(np.random.random(), p_up, py_dn)
        else:
            zstep = _step(np.random.random(), p_up, pz_dn)
        if zstep != 0 and ch_z < 0:
            ch_z = t
        if ystep != 0 and ch_y < 0:
            ch_y = t
        z += zstep
        y += ystep
        if z > y:
            violations += 1
            if first_v < 0:
                first_v = t
                vz = z
                vy = y
    return err, events, violations, first_v, vz, vy, z, y, t, ch_z, ch_y


def mmn_theta(k: int, spec: SystemSpec) -> float:
    """Probability of the extra pooled down-step when both chains sit at ``k``."""
    n = spec.n_servers
    B = n * (spec.lam + 1.0)
    pz = jffs_departure_rate(k, spec) / B
    py = min(k, n) / B
    stay = 1.0 - n * spec.lam / B - py
    return 0.0 if stay <= 0 else (pz - py) / stay


def coupled_mmn_run(spec: SystemSpec, events: int, seed: int, z0: int = 0, y0: int = 0,
                    t_max: float = 0.0, literal: bool = False) -> CouplingReport:
    """Pooled chain ``Z`` against the M/M/N chain ``Y`` under one uniformising clock.

    Both chains are uniformised at ``B = N (lam + 1)``. When they sit at the
    same level, ``Y`` steps first and ``Z`` copies its move, or takes an extra
    down-step with probability :func:`mmn_theta` when ``Y`` stays put.

    While the chains differ, the default construction runs a clock of rate
    ``2B`` and hands each tick to exactly one chain, so each still ticks at
    rate ``B`` but they never move together and cannot jump past each other.
    ``literal=True`` instead lets both chains step independently on every
    tick of a single rate-``B`` clock; from ``Z = Y - 1`` a joint up/down
    move then swaps their order, which the violation counter exposes.
    ``events`` counts clock ticks.
    """
    spec = validate_spec(spec)
    if z0 > y0:
        raise InitialOrderViolated("Z(0) must not exceed Y(0)")
    sizes = spec.pool_sizes.astype(np.int64)
    err, ev, viol, first, vz, vy, z, y, t, cz, cy = _mmn_kernel(
        spec.n_servers, spec.lam, _pool_rate_table(sizes, spec.speeds), int(z0), int(y0),
        int(events), float(t_max), kernel_seed(seed), bool(literal))
    if err == ERR_BERNOULLI:
        raise BernoulliOutOfRange("extra down-step probability left [0, 1]")
    return CouplingReport(
        "mmn", int(ev), int(viol), None if first < 0 else float(first),
        None if first < 0 else (int(vz), int(vy)), seed, float(t), (int(z), int(y)),
        (None if cz < 0 else float(cz), None if cy < 0 else float(cy)))


def rate_gap(q: QueueState, spec: SystemSpec) -> float:
    """Pooled service rate minus the separate farm's service rate at the same job count."""
    busy = q.busy_counts()
    return jffs_departure_rate(q.total_jobs, spec) - float(np.dot(spec.speeds, busy))


SA_JSQ = PolicyId(PolicyKind.SA_JSQ)
