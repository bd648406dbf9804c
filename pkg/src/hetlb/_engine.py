"""Compiled event loops.

The separate-queue kernel keeps, for every pool, the servers sorted by queue
length in ``order`` (with inverse ``pos``) together with ``cnt[j, v]``, the
number of pool-``j`` servers holding at least ``v`` jobs. Servers with exactly
``v`` jobs then occupy the contiguous positions
``[off + n - cnt[v], off + n - cnt[v + 1])``, so a +1 or -1 move is a single
swap to the edge of that block. Pool minima, busy counts and uniform draws
among minimal or busy servers are all O(1).
"""

from __future__ import annotations

import numba as nb
import numpy as np

SA_JSQ, JSQ, SED, SQ_D, SQ_D1_D2 = 0, 1, 2, 3, 4

OK = 0
ERR_LEVEL_OVERFLOW = 1
ERR_JOB_OVERFLOW = 2


@nb.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@nb.njit(cache=True)
def _randint(n):
    return np.random.randint(0, n)


@nb.njit(cache=True)
def _touch(acc, last, cnt, j, v, t):
    # flush the time integral of cnt[j, v] before it changes
    acc[j, v] += cnt[j, v] * (t - last[j, v])
    last[j, v] = t


@nb.njit(cache=True)
def _dist_term(cnt, xref, sizes, j, v):
    if v <= 0:
        return 0.0
    if v > xref.shape[0]:
        return cnt[j, v] / sizes[j]
    return abs(cnt[j, v] / sizes[j] - xref[v - 1, j])


@nb.njit(cache=True)
def _water_rate(total, sizes, speeds):
    r = 0.0
    rem = total
    for j in range(sizes.shape[0]):
        b = min(rem, sizes[j])
        if b <= 0:
            break
        r += speeds[j] * b
        rem -= b
    return r


@nb.njit(cache=True)
def _pick_sampled(q, pool_of, perm, lo_idx, hi_idx, d, best_q, best_pool, best_g, ties):
    """Partial Fisher-Yates over perm[lo_idx:hi_idx]; fold ``d`` draws into the running best."""
    for s in range(d):
        r = lo_idx + s + np.random.randint(0, hi_idx - lo_idx - s)
        tmp = perm[lo_idx + s]
        perm[lo_idx + s] = perm[r]
        perm[r] = tmp
        g = perm[lo_idx + s]
        qg = q[g]
        pg = pool_of[g]
        if qg < best_q or (qg == best_q and pg < best_pool):
            best_q = qg
            best_pool = pg
            best_g = g
            ties = 1
        elif qg == best_q and pg == best_pool:
            ties += 1
            if np.random.randint(0, ties) == 0:
                best_g = g
    return best_q, best_pool, best_g, ties


@nb.njit(cache=True)
def _dispatch(policy, dvec, q, order, cnt, sizes, offs, speeds, pool_of, perm, n_total):
    M = sizes.shape[0]
    if policy == SA_JSQ or policy == SED:
        best = 0
        if policy == SA_JSQ:
            bq = q[order[offs[0]]]
            for j in range(1, M):
                mj = q[order[offs[j]]]
                if mj < bq:
                    bq = mj
                    best = j
        else:
            br = q[order[offs[0]]] / speeds[0]
            for j in range(1, M):
                rj = q[order[offs[j]]] / speeds[j]
                if rj < br * (1.0 - 1e-12) and not (br == 0.0 and rj == 0.0):
                    br = rj
                    best = j
        m = q[order[offs[best]]]
        nmin = sizes[best] - cnt[best, m + 1]
        return order[offs[best] + np.random.randint(0, nmin)]
    if policy == JSQ:
        m = q[order[offs[0]]]
        for j in range(1, M):
            mj = q[order[offs[j]]]
            if mj < m:
                m = mj
        tot = 0
        for j in range(M):
            if q[order[offs[j]]] == m:
                tot += sizes[j] - cnt[j, m + 1]
        r = np.random.randint(0, tot)
        for j in range(M):
            if q[order[offs[j]]] == m:
                c = sizes[j] - cnt[j, m + 1]
                if r < c:
                    return order[offs[j] + r]
                r -= c
        return -1
    best_q = np.int64(1) << 62
    best_pool = M
    best_g = -1
    ties = 0
    if policy == SQ_D:
        best_q, best_pool, best_g, ties = _pick_sampled(
            q, pool_of, perm, 0, n_total, dvec[0], best_q, best_pool, best_g, ties)
    else:
        for j in range(M):
            if dvec[j] > 0:
                best_q, best_pool, best_g, ties = _pick_sampled(
                    q, pool_of, perm, offs[j], offs[j] + sizes[j], dvec[j],
                    best_q, best_pool, best_g, ties)
    return best_g


@nb.njit(cache=True)
def _inc(g, q, order, pos, cnt, sizes, offs, pool_of):
    j = pool_of[g]
    v = q[g]
    end_blk = offs[j] + sizes[j] - cnt[j, v + 1] - 1
    h = order[end_blk]
    p = pos[g]
    order[p] = h
    pos[h] = p
    order[end_blk] = g
    pos[g] = end_blk
    cnt[j, v + 1] += 1
    q[g] = v + 1


@nb.njit(cache=True)
def _dec(g, q, order, pos, cnt, sizes, offs, pool_of):
    j = pool_of[g]
    v = q[g]
    start_blk = offs[j] + sizes[j] - cnt[j, v]
    h = order[start_blk]
    p = pos[g]
    order[p] = h
    pos[h] = p
    order[start_blk] = g
    pos[g] = start_blk
    cnt[j, v] -= 1
    q[g] = v - 1


@nb.njit(cache=True)
def run_separate(sizes, speeds, lam, policy, dvec, init_q, total_arrivals, warmup_idx,
                 seed, lmax, t_max, track_jobs, sample_times, sample_depth,
                 xref, record_cap):
    """Simulate the separate-queue farm.

    Stops at the ``total_arrivals``-th arrival or, when ``t_max > 0``, at time
    ``t_max``. Statistics cover the window from the ``warmup_idx``-th arrival
    to the stopping time.
    """
    _seed(seed)
    M = sizes.shape[0]
    N = init_q.shape[0]
    offs = np.zeros(M, np.int64)
    for j in range(1, M):
        offs[j] = offs[j - 1] + sizes[j - 1]
    pool_of = np.empty(N, np.int64)
    for j in range(M):
        for k in range(sizes[j]):
            pool_of[offs[j] + k] = j
    q = init_q.copy()
    order = np.empty(N, np.int64)
    pos = np.empty(N, np.int64)
    cnt = np.zeros((M, lmax + 2), np.int64)
    for j in range(M):
        blk = np.argsort(q[offs[j]:offs[j] + sizes[j]], kind="mergesort")
        for p in range(sizes[j]):
            g = offs[j] + blk[p]
            order[offs[j] + p] = g
            pos[g] = offs[j] + p
        for k in range(sizes[j]):
            v = q[offs[j] + k]
            for u in range(v + 1):
                cnt[j, u] += 1
    perm = np.arange(N)

    # job bookkeeping
    init_jobs = 0
    for g in range(N):
        init_jobs += q[g]
    cap = init_jobs + total_arrivals + 1 if track_jobs else 1
    arr_t = np.empty(cap)
    arr_idx = np.empty(cap, np.int64)
    nxt = np.full(cap, -1, np.int64)
    head = np.full(N, -1, np.int64)
    tail = np.full(N, -1, np.int64)
    n_jobs = 0
    if track_jobs:
        for g in range(N):
            for _ in range(q[g]):
                arr_t[n_jobs] = 0.0
                arr_idx[n_jobs] = -1
                if tail[g] < 0:
                    head[g] = n_jobs
                else:
                    nxt[tail[g]] = n_jobs
                tail[g] = n_jobs
                n_jobs += 1

    acc = np.zeros((M, lmax + 2))
    last = np.zeros((M, lmax + 2))
    dist = 0.0
    for j in range(M):
        for v in range(1, lmax + 1):
            dist += _dist_term(cnt, xref, sizes, j, v)
    dist_acc = 0.0
    jobs_acc = 0.0
    total = init_jobs
    max_level = 0
    for g in range(N):
        if q[g] > max_level:
            max_level = q[g]

    n_samp = sample_times.shape[0]
    samples = np.zeros((n_samp, sample_depth, M))
    si = 0

    rec_q = np.zeros((record_cap, N), np.int32)
    rec_w = np.zeros(record_cap)
    n_rec = 0

    lam_n = N * lam
    t = 0.0
    t_warm = 0.0
    warm = warmup_idx <= 0
    arrivals = 0
    events = 0
    rt_sum = 0.0
    rt_sq = 0.0
    rt_n = 0
    post_arrivals = 0
    gap_checks = 0
    gap_fail = 0
    status = OK

    while True:
        dep_rate = 0.0
        for j in range(M):
            dep_rate += speeds[j] * cnt[j, 1]
        rate = lam_n + dep_rate
        t_next = t + np.random.exponential(1.0 / rate)
        while si < n_samp and sample_times[si] < t_next:
            if sample_times[si] >= t:
                for j in range(M):
                    for v in range(1, sample_depth + 1):
                        samples[si, v - 1, j] = cnt[j, v] / sizes[j] if v <= lmax else 0.0
            si += 1
        if t_max > 0.0 and t_next > t_max:
            if warm:
                jobs_acc += total * (t_max - t)
                dist_acc += dist * (t_max - t)
                if n_rec < record_cap:
                    for g in range(N):
                        rec_q[n_rec, g] = q[g]
                    rec_w[n_rec] = t_max - t
                    n_rec += 1
            t = t_max
            break
        if warm:
            jobs_acc += total * (t_next - t)
            dist_acc += dist * (t_next - t)
            if n_rec < record_cap:
                for g in range(N):
                    rec_q[n_rec, g] = q[g]
                rec_w[n_rec] = t_next - t
                n_rec += 1
        t = t_next
        u = np.random.random() * rate
        events += 1
        if u < lam_n:
            if not warm and arrivals >= warmup_idx:
                warm = True
                t_warm = t
                for j in range(M):
                    for v in range(lmax + 2):
                        acc[j, v] = 0.0
                        last[j, v] = t
            g = _dispatch(policy, dvec, q, order, cnt, sizes, offs, speeds, pool_of, perm, N)
            j = pool_of[g]
            v = q[g] + 1
            if v > lmax:
                status = ERR_LEVEL_OVERFLOW
                break
            dist -= _dist_term(cnt, xref, sizes, j, v)
            _touch(acc, last, cnt, j, v, t)
            _inc(g, q, order, pos, cnt, sizes, offs, pool_of)
            dist += _dist_term(cnt, xref, sizes, j, v)
            if v > max_level:
                max_level = v
            total += 1
            if track_jobs:
                if n_jobs >= cap:
                    status = ERR_JOB_OVERFLOW
                    break
                arr_t[n_jobs] = t
                arr_idx[n_jobs] = arrivals
                nxt[n_jobs] = -1
                if tail[g] < 0:
                    head[g] = n_jobs
                else:
                    nxt[tail[g]] = n_jobs
                tail[g] = n_jobs
                n_jobs += 1
            if arrivals >= warmup_idx:
                post_arrivals += 1
            arrivals += 1
            if t_max <= 0.0 and arrivals >= total_arrivals:
                break
        else:
            u -= lam_n
            j = 0
            while j < M - 1 and u >= speeds[j] * cnt[j, 1]:
                u -= speeds[j] * cnt[j, 1]
                j += 1
            if cnt[j, 1] == 0:
                # floating-point spill into an idle pool; step back to a busy one
                j = M - 1
                while cnt[j, 1] == 0:
                    j -= 1
            b = cnt[j, 1]
            g = order[offs[j] + sizes[j] - b + np.random.randint(0, b)]
            v = q[g]
            dist -= _dist_term(cnt, xref, sizes, j, v)
            _touch(acc, last, cnt, j, v, t)
            _dec(g, q, order, pos, cnt, sizes, offs, pool_of)
            dist += _dist_term(cnt, xref, sizes, j, v)
            total -= 1
            if track_jobs:
                job = head[g]
                head[g] = nxt[job]
                if head[g] < 0:
                    tail[g] = -1
                if arr_idx[job] >= warmup_idx:
                    rt = t - arr_t[job]
                    rt_sum += rt
                    rt_sq += rt * rt
                    rt_n += 1
        gap_checks += 1
        busy_rate = 0.0
        for jj in range(M):
            busy_rate += speeds[jj] * cnt[jj, 1]
        if busy_rate > _water_rate(total, sizes, speeds) * (1.0 + 1e-12) + 1e-12:
            gap_fail += 1

    while si < n_samp:
        if sample_times[si] <= t:
            for j in range(M):
                for v in range(1, sample_depth + 1):
                    samples[si, v - 1, j] = cnt[j, v] / sizes[j] if v <= lmax else 0.0
        si += 1

    for j in range(M):
        for v in range(lmax + 2):
            acc[j, v] += cnt[j, v] * (t - last[j, v])
    final_q = q.copy()
    return (status, t, t_warm, events, arrivals, acc, jobs_acc, dist_acc, rt_sum, rt_sq, rt_n,
            post_arrivals, max_level, samples, gap_checks, gap_fail, rec_q[:n_rec], rec_w[:n_rec],
            final_q)


@nb.njit(cache=True)
def run_birth_death(birth, death_table, k0, total_arrivals, warmup_idx, seed, t_max,
                    sample_times):
    """Birth-death chain with constant birth rate and death rate ``death_table[min(k, K)]``.

    Returns the post-warmup time integral of ``k`` and of ``k**2``, the time
    spent at each level (truncated at the table length), and sampled values.
    """
    _seed(seed)
    K = death_table.shape[0] - 1
    k = k0
    t = 0.0
    t_warm = 0.0
    warm = warmup_idx <= 0
    arrivals = 0
    events = 0
    acc = 0.0
    acc2 = 0.0
    occ = np.zeros(K + 2)
    n_samp = sample_times.shape[0]
    samples = np.zeros(n_samp)
    si = 0
    while True:
        d = death_table[min(k, K)]
        rate = birth + d
        t_next = t + np.random.exponential(1.0 / rate)
        while si < n_samp and sample_times[si] < t_next:
            if sample_times[si] >= t:
                samples[si] = k
            si += 1
        end = t_max > 0.0 and t_next > t_max
        if end:
            t_next = t_max
        if warm:
            dt = t_next - t
            acc += k * dt
            acc2 += k * k * dt
            occ[min(k, K + 1)] += dt
        t = t_next
        if end:
            break
        events += 1
        if np.random.random() * rate < birth:
            if not warm and arrivals >= warmup_idx:
                warm = True
                t_warm = t
            k += 1
            arrivals += 1
            if t_max <= 0.0 and arrivals >= total_arrivals:
                break
        else:
            k -= 1
    while si < n_samp:
        if sample_times[si] <= t:
            samples[si] = k
        si += 1
    return t, t_warm, events, arrivals, acc, acc2, occ, samples, k
