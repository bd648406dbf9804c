import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetlb.bounds import (
    bounds_csv, mgf_bound, mm1_psi_drift_expectation, phi_drift, phi_drift_batch, psi_drift,
    psi_drift_batch, psi_drift_upper_bound, psi_drift_upper_bound_batch,
    psi_drift_upper_bound_direct, stationary_drift_estimate,
    tail_bound, tail_sum_bound, tail_sum_constant, theta_grid, tightness_statistic,
)
from hetlb.desim import SimConfig, simulate_separate
from hetlb.errors import EmptySample, ThetaOutOfRange
from hetlb.fluid import fixed_point
from hetlb.model import QueueState, SystemSpec, TailMeasure, fig1_spec

SPEC = fig1_spec(10, 0.5)


def test_phi_examples():
    assert phi_drift(QueueState.empty(SPEC), SPEC) == pytest.approx(5.0)
    assert phi_drift(QueueState.uniform(SPEC, 1), SPEC) == pytest.approx(5.0)
    # large weighted backlog forces negative drift
    q = QueueState.uniform(SPEC, 10)
    assert 10 * 10 > 10 * 1.5 / 0.5 and phi_drift(q, SPEC) < 0


def test_psi_examples():
    e = QueueState.empty(SPEC)
    assert psi_drift(e, 0.5, SPEC) == pytest.approx(math.expm1(0.5) * 5, abs=1e-12)
    assert psi_drift(e, 0.5, SPEC) == pytest.approx(3.2436, abs=1e-4)
    assert psi_drift(QueueState.uniform(SPEC, 3), 0.0, SPEC) == 0.0
    assert psi_drift_upper_bound(e, 0.5, SPEC) == pytest.approx(
        -math.expm1(-0.5) * 10 * 0.5 * math.exp(0.5))
    assert psi_drift_upper_bound(QueueState.uniform(SPEC, 2), 0.0, SPEC) == 0.0
    with pytest.raises(ThetaOutOfRange):
        psi_drift(e, -0.1, SPEC)


def test_tail_bound_examples():
    # pool with mu * gamma = 0.5
    b, c = tail_bound(5, 0.5, 0, SPEC)
    assert c == pytest.approx(5.6935, abs=1e-4)
    assert b == pytest.approx(0.4673, abs=1e-4)
    assert mgf_bound(0.5, 0, SPEC) == c
    assert tail_bound(1, 1e-9, 1, SPEC)[1] == pytest.approx(1 / 0.5, rel=1e-6)
    with pytest.raises(ThetaOutOfRange):
        tail_bound(1, -math.log(0.5), 0, SPEC)
    with pytest.raises(ThetaOutOfRange):
        tail_bound(1, 0.0, 0, SPEC)


def test_tail_sum_examples():
    assert tail_sum_constant(0.5, SPEC) == pytest.approx(28.94, abs=0.01)
    assert tail_sum_bound(10, 0.5, SPEC) == pytest.approx(0.195, abs=1e-3)
    seq = [tail_sum_bound(l, 0.5, SPEC) for l in range(1, 200)]
    assert np.all(np.diff(seq) < 0) and seq[-1] < 1e-40
    with pytest.raises(ThetaOutOfRange):
        tail_sum_bound(1, 0.8, SPEC)


def test_tightness_examples():
    xs = fixed_point(fig1_spec(10, 0.7))
    assert tightness_statistic(xs, 2) == 0.0
    assert tightness_statistic(xs, 1) == 1.0
    assert tightness_statistic(TailMeasure.zeros(2, 8), 3) == 0.0


def test_theta_grid():
    assert theta_grid(0.5) == pytest.approx([0.1, 0.25, 0.5, 0.9 * math.log(2)])
    g = theta_grid(0.8)
    assert all(0 < t < -math.log(0.8) for t in g)


def test_bounds_csv():
    out = bounds_csv([(1, 0.5, 0, np.float64(0.1), 0.2)])
    assert out == "l,theta,j,empirical,bound\n1,0.5,1,0.1,0.2\n"


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.05, 0.95))
def test_drift_majorants(seed, lam):
    spec = fig1_spec(10, lam)
    rng = np.random.default_rng(seed)
    states = rng.geometric(rng.uniform(0.2, 0.9), size=(50, 10)) - 1
    for theta in theta_grid(lam):
        d = psi_drift_batch(states, theta, spec)
        ub = psi_drift_upper_bound_batch(states, theta, spec)
        assert np.all(d <= ub)
        assert np.all(d <= -math.expm1(-theta) * spec.n_servers + 1e-9)
    w = states @ np.repeat(spec.speeds, spec.pool_sizes)
    big = w > spec.n_servers * (1 + lam) / (1 - lam)
    assert np.all(phi_drift_batch(states, spec)[big] < 0)


def test_batch_matches_scalar():
    rng = np.random.default_rng(0)
    states = rng.integers(0, 5, size=(20, 10))
    for s, v, u in zip(states, psi_drift_batch(states, 0.3, SPEC),
                       psi_drift_upper_bound_batch(states, 0.3, SPEC)):
        q = QueueState.from_flat(s, SPEC)
        assert psi_drift(q, 0.3, SPEC) == pytest.approx(v, rel=1e-13)
        assert psi_drift_upper_bound(q, 0.3, SPEC) == pytest.approx(u, rel=1e-13)


def test_drift_estimate_edges():
    with pytest.raises(EmptySample):
        stationary_drift_estimate(np.zeros((0, 10)), np.zeros(0), 0.3, SPEC)
    e = stationary_drift_estimate([QueueState.empty(SPEC)], [1.0], 0.0, SPEC)
    assert e.value == 0.0


def test_mm1_drift_oracle():
    for lam in (0.3, 0.5, 0.8):
        for th in theta_grid(lam):
            assert abs(mm1_psi_drift_expectation(lam, th)) <= 1e-12
    spec = SystemSpec.from_arrays([1.0], [1.0], 1, 0.5)
    m = simulate_separate(SimConfig(spec, total_arrivals=400_000, seed=9, record_states=10**6))
    for th in (0.1, 0.3, 0.5):
        est = stationary_drift_estimate(m.states, m.dwell, th, spec)
        assert abs(est.value - mm1_psi_drift_expectation(0.5, th)) <= 4 * est.stderr


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_upper_bound_forms_agree(seed):
    rng = np.random.default_rng(seed)
    states = rng.integers(0, 8, size=(30, 10))
    a = psi_drift_upper_bound_batch(states, 0.4, SPEC)
    b = psi_drift_upper_bound_direct(states, 0.4, SPEC)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9)
    # equal queues make the bound tight
    q = np.full((1, 10), int(rng.integers(0, 6)))
    assert psi_drift_upper_bound_batch(q, 0.4, SPEC)[0] == psi_drift_batch(q, 0.4, SPEC)[0]
