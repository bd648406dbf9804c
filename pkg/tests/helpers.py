"""Random specs and fluid states shared by the test modules."""

import numpy as np

from hetlb.model import SystemSpec, TailMeasure


def random_spec(rng, max_pools=4, n=100, lam=None) -> SystemSpec:
    """Random farm with ``n * gamma_j`` integral and capacity normalised to 1."""
    m = int(rng.integers(1, max_pools + 1))
    cuts = np.sort(rng.choice(np.arange(1, n), size=m - 1, replace=False)) if m > 1 else []
    counts = np.diff(np.concatenate([[0], cuts, [n]]))
    gam = counts / n
    raw = np.sort(rng.uniform(0.2, 5.0, size=m))[::-1]
    # strictly decreasing speeds
    raw = raw + np.arange(m)[::-1] * 1e-3
    mu = raw / float(np.dot(gam, raw))
    if lam is None:
        lam = float(rng.uniform(0.05, 0.95))
    return SystemSpec.from_arrays(mu, gam, n, lam)


def random_measure(rng, m, depth=20, max_level=4) -> TailMeasure:
    """Random monotone tail measure with a random minimum level per pool."""
    base = int(rng.integers(0, max_level))
    x = np.zeros((depth, m))
    for j in range(m):
        l = base + int(rng.integers(0, 3))
        x[:l, j] = 1.0
        v = float(rng.uniform(0.0, 0.999))
        for i in range(l, min(depth - 1, l + 4)):
            x[i, j] = v
            v *= float(rng.uniform(0.0, 1.0))
    return TailMeasure(x)


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
