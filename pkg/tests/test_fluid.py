import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetlb.errors import StepTooLarge, TruncationTooSmall
from hetlb.fluid import (
    compute_arrival_split, fast_chain_stationary_oracle, fixed_point, fixed_point_csv, fluid_rhs,
    integrate_fluid, integrate_pooled, min_level, pooled_fixed_point, suggest_truncation,
)
from hetlb.model import SystemSpec, TailMeasure, fig1_spec, sum_distance

from helpers import random_measure, random_spec


def tm(d, depth=8, m=2):
    x = np.zeros((depth, m))
    for (i, j), v in d.items():
        x[i - 1, j] = v
    return TailMeasure(x)


def test_min_level_examples():
    assert min_level(TailMeasure.zeros(2, 5), 0) == 0
    x = tm({(1, 0): 1.0, (2, 0): 0.5})
    assert min_level(x, 0) == 1
    x = tm({(1, 0): 1 - 1e-12})
    assert min_level(x, 0) == 1


def test_split_examples():
    s = compute_arrival_split(TailMeasure.zeros(2, 5), fig1_spec(10, 0.5))
    assert s.p(0, 0) == 1.0 and s.probabilities.sum() == 1.0

    s = compute_arrival_split(fixed_point(fig1_spec(10, 0.7)), fig1_spec(10, 0.7))
    assert s.p(0, 0) == pytest.approx(5 / 7, abs=1e-14)
    assert s.p(0, 1) == pytest.approx(2 / 7, abs=1e-14)
    assert s.absorber == (1, 0)
    assert s.components[0].rho == pytest.approx(5 / 7)

    x = tm({(1, 0): 1.0, (1, 1): 1.0})
    s = compute_arrival_split(x, fig1_spec(10, 0.3))
    assert s.p(0, 0) == 1.0 and s.probabilities.sum() == 1.0
    assert [c.status for c in s.components] == ["saturating", "starved"]
    assert s.to_csv().startswith("level,pool,p,status\n")


def test_fixed_point_examples():
    x = fixed_point(fig1_spec(10, 0.4))
    assert x.x(1, 0) == pytest.approx(0.8) and x.x(1, 1) == 0.0
    x = fixed_point(fig1_spec(10, 0.7))
    assert x.x(1, 0) == 1.0 and x.x(1, 1) == pytest.approx(0.4)
    x = fixed_point(fig1_spec(10, 1 - 1e-9))
    assert np.allclose(x.values[0], 1.0, atol=1e-8)
    rows = [r.split(",") for r in fixed_point_csv(fig1_spec(10, 0.7)).splitlines()]
    assert rows[0] == ["j", "x1"] and rows[1] == ["1", "1"] and rows[2] == ["2", "0.4"]
    assert float(rows[2][1]) == pytest.approx(0.4, abs=1e-15)


def test_pooled_fixed_point_examples():
    assert pooled_fixed_point(fig1_spec(10, 0.7)) == pytest.approx(0.52)
    assert pooled_fixed_point(fig1_spec(10, 0.4)) == pytest.approx(0.16)
    one = SystemSpec.from_arrays([1.0], [1.0], 10, 0.37)
    assert pooled_fixed_point(one) == pytest.approx(0.37)


def test_rhs_examples():
    spec = fig1_spec(10, 0.4)
    d = fluid_rhs(TailMeasure.zeros(2, 6), spec)
    assert d[0, 0] == pytest.approx(2.0)
    d[0, 0] = 0.0
    assert np.all(d == 0)
    spec = fig1_spec(10, 0.7)
    assert np.abs(fluid_rhs(fixed_point(spec), spec)).max() <= 1e-12


def test_integrate_examples():
    spec = fig1_spec(10, 0.4)
    xs = fixed_point(spec)
    tr = integrate_fluid(xs, spec, 5.0)
    assert np.abs(tr.values - xs.padded(tr.values.shape[1])[None]).max() <= 1e-9
    tr = integrate_fluid(TailMeasure.zeros(2, 16), spec, 200.0)
    assert sum_distance(tr.final, xs) <= 1e-4


def test_integrate_from_queue_five_drains():
    spec = fig1_spec(10, 0.7)
    x = np.zeros((10, 2))
    x[:5] = 1.0
    tr = integrate_fluid(TailMeasure(x), spec, 8.0, sample_dt=0.05)
    v1 = np.array([float(np.dot(spec.fractions, v.sum(axis=0))) for v in tr.values])
    busy = tr.values[:, 0, :].min(axis=1) >= 1 - 1e-12
    seg = v1[busy]
    assert len(seg) > 10 and np.all(np.diff(seg) < 0)


def test_step_too_large():
    spec = fig1_spec(10, 0.9)
    with pytest.raises(StepTooLarge):
        integrate_fluid(TailMeasure.zeros(2, 16), spec, 5.0, dt=0.5)


def test_pooled_integration():
    spec = fig1_spec(10, 0.7)
    _, z = integrate_pooled(0.0, spec, 100.0)
    assert abs(z[-1] - 0.52) <= 1e-6
    _, z = integrate_pooled(0.52, spec, 10.0)
    assert np.allclose(z, 0.52, atol=1e-12)
    _, z = integrate_pooled(5.0, spec, 100.0)
    assert np.all(np.diff(z) <= 1e-15) and z[-1] == pytest.approx(0.52, abs=1e-6)


def test_oracle_examples():
    assert fast_chain_stationary_oracle([0.3], 0.6)[0] == pytest.approx(0.5, abs=1e-6)
    r = fast_chain_stationary_oracle([0.2, 0.3], 0.9)
    assert np.allclose(r, [2 / 9, 1 / 3], atol=1e-6)
    with pytest.raises(TruncationTooSmall):
        fast_chain_stationary_oracle([0.4, 0.3], 0.6, truncation=40)
    with pytest.raises(TruncationTooSmall):
        suggest_truncation([0.4, 0.3], 0.6)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_split_properties(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    x = random_measure(rng, spec.n_pools)
    s = compute_arrival_split(x, spec)
    p = s.probabilities
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-12)
    for j, l in enumerate(s.min_levels):
        # support confined to offer levels l_j - 1 and l_j
        assert np.all(p[l + 1:, j] == 0)
        if l > 0:
            assert np.all(p[: l - 1, j] == 0)
    if s.min_levels[0] == 0:
        assert p[0, 0] == 1.0
    assert sum(c.status == "saturating" for c in s.components) <= 1
    for c in s.components:
        if c.status == "stable":
            assert p[c.level, c.pool] >= c.rho - 1e-15
    # boundary feasibility: full coordinates cannot grow
    d = fluid_rhs(x, spec)
    assert np.all(d[x.values >= 1 - 1e-9] <= 1e-12)
    # mass balance of the scaled total
    lhs = float(np.dot(spec.fractions, d.sum(axis=0)))
    rhs = spec.lam - float(np.dot(spec.fractions * spec.speeds, x.values[0]))
    assert lhs == pytest.approx(rhs, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_fixed_point_consistency(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    xs = fixed_point(spec)
    assert np.abs(fluid_rhs(xs, spec)).max() <= 1e-12
    assert float(np.dot(spec.fractions, xs.values[0])) == pytest.approx(
        pooled_fixed_point(spec), abs=1e-12)
    assert float(np.dot(spec.fractions * spec.speeds, xs.values[0])) == pytest.approx(
        spec.lam, abs=1e-12)


def test_oracle_matches_stable_prefix():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 10:
        spec = random_spec(rng, max_pools=3)
        s = compute_arrival_split(random_measure(rng, spec.n_pools), spec)
        stable = [c for c in s.components if c.status == "stable"]
        if not stable or sum(c.rho for c in stable) > 0.6:
            continue
        r = fast_chain_stationary_oracle([c.nu for c in stable], spec.lam)
        assert np.allclose(r, [c.rho for c in stable], atol=1e-6)
        checked += 1


def test_fluid_monotonicity():
    rng = np.random.default_rng(3)
    spec = fig1_spec(10, 0.8)
    for _ in range(3):
        a = random_measure(rng, 2, depth=16)
        b = TailMeasure(np.maximum(a.values, random_measure(rng, 2, depth=16).values))
        ta = integrate_fluid(a, spec, 10.0, sample_dt=0.1, depth=16)
        tb = integrate_fluid(b, spec, 10.0, sample_dt=0.1, depth=16)
        assert np.all(ta.values <= tb.values + 1e-6)


def test_lumped_oracle_matches_product_chain():
    for nus, lam in (([0.2, 0.15, 0.1], 0.9), ([0.1, 0.2], 0.6), ([0.25], 0.5)):
        full = fast_chain_stationary_oracle(nus, lam)
        lumped = fast_chain_stationary_oracle(nus, lam, lumped=True)
        assert np.allclose(full, lumped, atol=1e-7)
        assert np.allclose(lumped, np.asarray(nus) / lam, atol=1e-6)
