"""Fluid limit of the SA-JSQ farm and of the pooled system.

The fluid state is a :class:`~hetlb.model.TailMeasure`. Its drift needs the
arrival split ``p[i - 1, j]``: the share of arrivals joining a pool-``j``
server that holds ``i - 1`` jobs. The split comes from a cascade over the
pools whose minimum level is lowest or one above it:

1. ``l_j`` is the minimum level of pool ``j`` and ``Lmin = min_j l_j``; ``j*``
   is the fastest pool at ``Lmin``.
2. If ``Lmin >= 1`` every pool at ``Lmin`` offers level ``Lmin - 1`` with rate
   ``nu = gamma_j mu_j (x[Lmin, j] - x[Lmin + 1, j])``.
3. Every pool faster than ``j*`` sitting at ``Lmin + 1`` offers level ``Lmin``
   with rate ``nu = gamma_k mu_k (x[Lmin + 1, k] - x[Lmin + 2, k])``.
4. Offers are served in that order and each takes ``rho = nu / lam``. The
   first offer that would push the running total to 1 or beyond saturates
   and takes what is left; later offers get nothing. If every offer fits,
   the rest goes to pool ``j*`` at level ``Lmin``.

Arrays index pools from 0 and store level ``i`` in row ``i - 1``; the split
array stores offer level ``r`` in row ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numba as nb
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DepthExceeded, PoolCountMismatch, StepTooLarge, TruncationTooSmall
from .model import DEFAULT_DEPTH, SystemSpec, TailMeasure, validate_spec

BOUNDARY_EPS = 1e-9
DEFAULT_DT = 1e-3
PROJECTION_GUARD = 1e-3
MAX_HALVINGS = 8

STABLE, SATURATING, STARVED = 0, 1, 2
STATUS_NAMES = ("stable", "saturating", "starved")


@dataclass(frozen=True)
class Component:
    pool: int
    level: int
    nu: float
    rho: float
    status: str


@dataclass(frozen=True)
class ArrivalSplit:
    probabilities: np.ndarray
    components: tuple[Component, ...]
    absorber: Optional[tuple[int, int]]
    min_levels: tuple[int, ...]

    def p(self, offer_level: int, j: int) -> float:
        if offer_level < 0 or offer_level >= self.probabilities.shape[0]:
            return 0.0
        return float(self.probabilities[offer_level, j])

    def to_csv(self) -> str:
        status = {}
        for c in self.components:
            status[(c.level, c.pool)] = c.status
        if self.absorber is not None:
            status[(self.absorber[1], self.absorber[0])] = "absorber"
        rows = ["level,pool,p,status"]
        for r in range(self.probabilities.shape[0]):
            for j in range(self.probabilities.shape[1]):
                p = self.probabilities[r, j]
                if p > 0 or (r, j) in status:
                    rows.append(f"{r},{j + 1},{float(p)!r},{status.get((r, j), 'none')}")
        return "\n".join(rows) + "\n"


@nb.njit(cache=True)
def _xval(x, i, j):
    if i <= 0:
        return 1.0
    if i > x.shape[0]:
        return 0.0
    return x[i - 1, j]


@nb.njit(cache=True)
def _min_level(x, j, eps):
    D = x.shape[0]
    for i in range(D + 1):
        if _xval(x, i + 1, j) < 1.0 - eps:
            return i
    return D


@nb.njit(cache=True)
def _split_core(x, gam, mu, lam, eps, p, c_pool, c_level, c_nu, c_status):
    """Fill ``p`` (shape (depth + 1, M)) and the cascade arrays; return (n_comp, j*, Lmin, absorbed)."""
    M = x.shape[1]
    p[:, :] = 0.0
    lmin = 1 << 30
    jstar = 0
    levels = np.empty(M, np.int64)
    for j in range(M):
        levels[j] = _min_level(x, j, eps)
        if levels[j] < lmin:
            lmin = levels[j]
            jstar = j
    n = 0
    if lmin >= 1:
        for j in range(M):
            if levels[j] == lmin:
                c_pool[n] = j
                c_level[n] = lmin - 1
                c_nu[n] = gam[j] * mu[j] * (_xval(x, lmin, j) - _xval(x, lmin + 1, j))
                n += 1
    for k in range(jstar):
        if levels[k] == lmin + 1:
            c_pool[n] = k
            c_level[n] = lmin
            c_nu[n] = gam[k] * mu[k] * (_xval(x, lmin + 1, k) - _xval(x, lmin + 2, k))
            n += 1
    used = 0.0
    saturated = False
    for c in range(n):
        rho = c_nu[c] / lam
        if saturated:
            c_status[c] = STARVED
        elif used + rho < 1.0:
            c_status[c] = STABLE
            p[c_level[c], c_pool[c]] += rho
            used += rho
        else:
            c_status[c] = SATURATING
            p[c_level[c], c_pool[c]] += 1.0 - used
            used = 1.0
            saturated = True
    absorbed = not saturated
    if absorbed:
        p[lmin, jstar] += 1.0 - used
    return n, jstar, lmin, absorbed


def _as_array(x, spec: Optional[SystemSpec] = None) -> np.ndarray:
    v = x.values if isinstance(x, TailMeasure) else np.asarray(x, dtype=float)
    if spec is not None and (v.ndim != 2 or v.shape[1] != spec.n_pools):
        raise PoolCountMismatch(f"measure has shape {v.shape}, spec has {spec.n_pools} pools")
    return np.ascontiguousarray(v, dtype=np.float64)


def min_level(x: TailMeasure, j: int, eps: float = BOUNDARY_EPS) -> int:
    """Smallest ``i >= 0`` with ``x[i + 1, j] < 1 - eps``."""
    return int(_min_level(_as_array(x), int(j), eps))


def compute_arrival_split(x: TailMeasure, spec: SystemSpec) -> ArrivalSplit:
    v = _as_array(x, spec)
    D, M = v.shape
    p = np.zeros((D + 1, M))
    cp = np.zeros(2 * M, np.int64)
    cl = np.zeros(2 * M, np.int64)
    cn = np.zeros(2 * M)
    cs = np.zeros(2 * M, np.int64)
    n, jstar, lmin, absorbed = _split_core(v, spec.fractions, spec.speeds, spec.lam,
                                           BOUNDARY_EPS, p, cp, cl, cn, cs)
    comps = tuple(Component(int(cp[c]), int(cl[c]), float(cn[c]), float(cn[c] / spec.lam),
                            STATUS_NAMES[cs[c]]) for c in range(n))
    levels = tuple(int(_min_level(v, j, BOUNDARY_EPS)) for j in range(M))
    p.setflags(write=False)
    return ArrivalSplit(p, comps, (int(jstar), int(lmin)) if absorbed else None, levels)


@nb.njit(cache=True)
def _rhs(x, gam, mu, lam, eps, p, cp, cl, cn, cs, out):
    _split_core(x, gam, mu, lam, eps, p, cp, cl, cn, cs)
    D, M = x.shape
    for j in range(M):
        a = lam / gam[j]
        for i in range(D):
            nxt = x[i + 1, j] if i + 1 < D else 0.0
            out[i, j] = a * p[i, j] - mu[j] * (x[i, j] - nxt)


def fluid_rhs(x: TailMeasure, spec: SystemSpec) -> np.ndarray:
    """``dx[i, j]/dt`` as an array shaped like ``x.values``."""
    v = _as_array(x, spec)
    D, M = v.shape
    out = np.zeros((D, M))
    _rhs(v, spec.fractions, spec.speeds, spec.lam, BOUNDARY_EPS, np.zeros((D + 1, M)),
         np.zeros(2 * M, np.int64), np.zeros(2 * M, np.int64), np.zeros(2 * M),
         np.zeros(2 * M, np.int64), out)
    return out


@nb.njit(cache=True)
def _project(y):
    D, M = y.shape
    for j in range(M):
        prev = 1.0
        for i in range(D):
            v = y[i, j]
            if v < 0.0:
                v = 0.0
            if v > prev:
                v = prev
            y[i, j] = v
            prev = v


@nb.njit(cache=True)
def _rk4_step(x, dt, gam, mu, lam, eps, ws):
    p, cp, cl, cn, cs, k1, k2, k3, k4, tmp = ws
    _rhs(x, gam, mu, lam, eps, p, cp, cl, cn, cs, k1)
    tmp[:, :] = x + 0.5 * dt * k1
    _project(tmp)
    _rhs(tmp, gam, mu, lam, eps, p, cp, cl, cn, cs, k2)
    tmp[:, :] = x + 0.5 * dt * k2
    _project(tmp)
    _rhs(tmp, gam, mu, lam, eps, p, cp, cl, cn, cs, k3)
    tmp[:, :] = x + dt * k3
    _project(tmp)
    _rhs(tmp, gam, mu, lam, eps, p, cp, cl, cn, cs, k4)
    y = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    raw = y.copy()
    _project(y)
    moved = np.max(np.abs(y - raw))
    return y, moved


@nb.njit(cache=True)
def _integrate(x0, gam, mu, lam, eps, dt, nsteps, every, guard, halvings):
    D, M = x0.shape
    ws = (np.zeros((D + 1, M)), np.zeros(2 * M, np.int64), np.zeros(2 * M, np.int64),
          np.zeros(2 * M), np.zeros(2 * M, np.int64), np.zeros((D, M)), np.zeros((D, M)),
          np.zeros((D, M)), np.zeros((D, M)), np.zeros((D, M)))
    n_out = nsteps // every + 1
    out = np.zeros((n_out, D, M))
    x = x0.copy()
    out[0] = x
    k = 1
    refined = 0
    for step in range(nsteps):
        y, moved = _rk4_step(x, dt, gam, mu, lam, eps, ws)
        if moved > guard:
            ok = False
            for h in range(1, halvings + 1):
                m = 1 << h
                sub = dt / m
                z = x.copy()
                worst = 0.0
                for s in range(m):
                    z, mv = _rk4_step(z, sub, gam, mu, lam, eps, ws)
                    if mv > worst:
                        worst = mv
                if worst <= guard:
                    y = z
                    ok = True
                    break
            if not ok:
                return out[:k], step, refined
            refined += 1
        x = y
        if (step + 1) % every == 0:
            out[k] = x
            k += 1
    return out[:k], -1, refined


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    refined_steps: int = 0

    def measure(self, k: int) -> TailMeasure:
        return TailMeasure(self.values[k])

    @property
    def final(self) -> TailMeasure:
        return self.measure(len(self.times) - 1)

    def to_csv(self) -> str:
        rows = ["t,i,j,x"]
        for t, x in zip(self.times, self.values):
            for i in range(x.shape[0]):
                for j in range(x.shape[1]):
                    rows.append(f"{float(t)!r},{i + 1},{j + 1},{float(x[i, j])!r}")
        return "\n".join(rows) + "\n"


def integrate_fluid(x0: TailMeasure, spec: SystemSpec, t_end: float, dt: float = DEFAULT_DT,
                    sample_dt: Optional[float] = None, depth: Optional[int] = None) -> Trajectory:
    """Fixed-step RK4 with projection back onto monotone tails after every stage.

    When a step's projection moves a coordinate by more than 1e-3 the step is
    redone with 2, 4, ... up to 256 sub-steps; if none satisfies the guard,
    :class:`StepTooLarge` is raised.

    Arrivals only land at a pool's minimum level or one above it, so mass
    never climbs above ``max(highest occupied level, min level + 2)``.
    ``depth`` therefore defaults to the highest occupied level plus 4 (at
    least 16).
    """
    spec = validate_spec(spec)
    _as_array(x0, spec)
    if dt <= 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    if depth is None:
        occupied = np.flatnonzero(x0.values.max(axis=1) > 0)
        depth = max(16, (int(occupied[-1]) + 1 if occupied.size else 0) + 4)
    v = x0.padded(depth)
    nsteps = int(round(t_end / dt))
    every = max(1, int(round((sample_dt if sample_dt else max(dt, t_end / 200)) / dt)))
    out, fail, refined = _integrate(np.ascontiguousarray(v), spec.fractions, spec.speeds,
                                    spec.lam, BOUNDARY_EPS, float(dt), nsteps, every,
                                    PROJECTION_GUARD, MAX_HALVINGS)
    if fail >= 0:
        raise StepTooLarge(f"projection exceeded {PROJECTION_GUARD} at t={fail * dt:.6g} "
                           f"even with {1 << MAX_HALVINGS} sub-steps")
    if np.any(out[:, -1, :] > 0):
        raise DepthExceeded(f"fluid mass reached the truncation level {depth}")
    times = np.arange(out.shape[0]) * every * dt
    return Trajectory(times, out, int(refined))


def fixed_point(spec: SystemSpec, depth: int = DEFAULT_DEPTH) -> TailMeasure:
    """Stationary fluid state: pools fill fastest-first at level 1, nothing above."""
    gam, mu, lam = spec.fractions, spec.speeds, spec.lam
    v = np.zeros((depth, spec.n_pools))
    served = 0.0
    for j in range(spec.n_pools):
        v[0, j] = min(1.0, max(lam - served, 0.0) / (mu[j] * gam[j]))
        served += mu[j] * gam[j]
    return TailMeasure(v)


def pooled_fixed_point(spec: SystemSpec) -> float:
    gam, mu, lam = spec.fractions, spec.speeds, spec.lam
    g_before = np.concatenate([[0.0], np.cumsum(gam)[:-1]])
    c_before = np.concatenate([[0.0], np.cumsum(gam * mu)[:-1]])
    return float(np.max(g_before + (lam - c_before) / mu))


@nb.njit(cache=True)
def _pooled_rate(z, gam, mu):
    r = 0.0
    before = 0.0
    for j in range(gam.shape[0]):
        b = z - before
        if b <= 0.0:
            break
        r += mu[j] * min(b, gam[j])
        before += gam[j]
    return r


@nb.njit(cache=True)
def _pooled_rk4(z0, gam, mu, lam, dt, nsteps, every):
    out = np.zeros(nsteps // every + 1)
    z = z0
    out[0] = z
    k = 1
    for s in range(nsteps):
        a = lam - _pooled_rate(z, gam, mu)
        b = lam - _pooled_rate(z + 0.5 * dt * a, gam, mu)
        c = lam - _pooled_rate(z + 0.5 * dt * b, gam, mu)
        d = lam - _pooled_rate(z + dt * c, gam, mu)
        z = z + dt / 6.0 * (a + 2 * b + 2 * c + d)
        if (s + 1) % every == 0:
            out[k] = z
            k += 1
    return out[:k]


def pooled_service_rate(z: float, spec: SystemSpec) -> float:
    return float(_pooled_rate(float(z), spec.fractions, spec.speeds))


def integrate_pooled(z0: float, spec: SystemSpec, t_end: float, dt: float = DEFAULT_DT,
                     sample_dt: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """RK4 for ``dz/dt = lam - T(z)``; returns (times, z)."""
    if z0 < 0:
        raise ValueError("z0 must be non-negative")
    nsteps = int(round(t_end / dt))
    every = max(1, int(round((sample_dt if sample_dt else max(dt, t_end / 200)) / dt)))
    z = _pooled_rk4(float(z0), spec.fractions, spec.speeds, spec.lam, float(dt), nsteps, every)
    return np.arange(len(z)) * every * dt, z


def suggest_truncation(nus: Sequence[float], lam: float, target: float = 1e-9) -> int:
    """Truncation level at which the geometric decay of every component reaches ``target``.

    Component ``i`` empties only while the earlier ones are empty, so its tail
    ratio is roughly ``rho_i / (1 - sum_{k<i} rho_k)``.
    """
    rho = np.asarray(nus, dtype=float) / lam
    before = np.concatenate([[0.0], np.cumsum(rho)[:-1]])
    ratio = float(np.max(rho / np.maximum(1.0 - before, 1e-300)))
    if ratio >= 1.0:
        raise TruncationTooSmall("no truncation can hold an unstable cascade")
    if ratio <= 0.0:
        return 10
    return max(10, int(math.ceil(math.log(target) / math.log(ratio))) + 5)


def _stationary(Q: sp.csr_matrix) -> np.ndarray:
    # pin state 0 to 1 instead of adding a dense normalisation row; that row
    # destroys the sparsity of the factorisation
    n = Q.shape[0]
    pin = sp.csr_matrix(([1.0], ([0], [0])), shape=(1, n))
    A = sp.vstack([pin, Q.T.tocsr()[1:]]).tocsc()
    b = np.zeros(n)
    b[0] = 1.0
    if n <= 30_000:
        pi = spla.spsolve(A, b)
    else:
        ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=20)
        pre = spla.LinearOperator(A.shape, ilu.solve)
        pi, info = spla.gmres(A, b, M=pre, rtol=1e-13, atol=0.0, restart=100, maxiter=2000)
        if info != 0:
            raise TruncationTooSmall("iterative stationary solve did not converge")
    return pi / pi.sum()


def _oracle_solve(nus: np.ndarray, lam: float, T: int) -> tuple[np.ndarray, float]:
    K = len(nus)
    shape = (T + 1,) * K
    n = (T + 1) ** K
    idx = np.arange(n)
    coords = np.array(np.unravel_index(idx, shape))
    strides = np.array([(T + 1) ** (K - 1 - i) for i in range(K)])
    rows, cols, vals = [], [], []
    for i in range(K):
        up = coords[i] < T
        rows.append(idx[up])
        cols.append(idx[up] + strides[i])
        vals.append(np.full(up.sum(), nus[i]))
        first = coords[i] > 0
        for k in range(i):
            first &= coords[k] == 0
        rows.append(idx[first])
        cols.append(idx[first] - strides[i])
        vals.append(np.full(first.sum(), float(lam)))
    Q = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    Q = (Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())).tocsr()
    pi = _stationary(Q)
    if not np.all(np.isfinite(pi)) or pi.min() < -1e-9:
        return np.full(K, np.nan), float("inf")
    boundary = float(pi[np.any(coords == T, axis=0)].sum())
    res = np.zeros(K)
    for i in range(K):
        mask = coords[i] > 0
        for k in range(i):
            mask &= coords[k] == 0
        res[i] = pi[mask].sum()
    return res, boundary


ORACLE_MAX_STATES = 400_000


def _oracle_auto(nus: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    T = suggest_truncation(nus, lam)
    while True:
        res, boundary = _oracle_solve(nus, lam, T)
        nxt = int(math.ceil(1.25 * T))
        if boundary <= 1e-8 or (nxt + 1) ** len(nus) > ORACLE_MAX_STATES:
            return res, boundary
        T = nxt


def fast_chain_stationary_oracle(nus: Sequence[float], lam: float,
                                 truncation: Optional[int] = None,
                                 lumped: bool = False) -> np.ndarray:
    """Stationary ``P(0 = U_1 = ... = U_{i-1} < U_i)`` of the truncated cascade chain.

    Component ``i`` grows at rate ``nus[i]`` (blocked at the truncation level)
    and shrinks at rate ``lam`` only while every earlier component is empty.
    The generator is assembled and its null vector solved directly. Raises
    :class:`TruncationTooSmall` if more than 1e-6 of the mass sits on the
    truncation boundary.

    Without an explicit ``truncation`` the level starts at
    :func:`suggest_truncation` and grows by a quarter until the boundary mass
    is below 1e-8 or the state space would exceed ``ORACLE_MAX_STATES``.

    ``lumped=True`` solves, for each ``i``, the two-dimensional chain of
    ``(U_1 + ... + U_{i-1}, U_i)`` instead of the full product chain. All
    components drain at the same rate, so the sum of the earlier ones is
    itself a birth-death process and the pair is Markov. This keeps heavy
    loads with three or four components within reach.
    """
    nus = np.asarray(nus, dtype=float)
    K = len(nus)
    if not 1 <= K <= 4:
        raise ValueError("oracle supports 1 to 4 components")
    if truncation is not None and truncation < 10:
        raise ValueError("truncation must be >= 10")
    if lumped and K > 1:
        parts = [fast_chain_stationary_oracle(nus[:1], lam, truncation)]
        for i in range(1, K):
            pair = np.array([nus[:i].sum(), nus[i]])
            parts.append(fast_chain_stationary_oracle(pair, lam, truncation)[1:])
        return np.concatenate(parts)
    if truncation is not None:
        res, boundary = _oracle_solve(nus, lam, int(truncation))
    else:
        res, boundary = _oracle_auto(nus, lam)
    if boundary > 1e-6:
        raise TruncationTooSmall(f"mass {boundary:.3g} at the truncation boundary")
    return res


def fixed_point_csv(spec: SystemSpec) -> str:
    x = fixed_point(spec, depth=1)
    # 15 significant digits strip the last-ulp noise of lam - sum(mu * gamma)
    rows = ["j,x1"] + [f"{j + 1},{float(x.values[0, j]):.15g}" for j in range(spec.n_pools)]
    return "\n".join(rows) + "\n"
