import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hetlb.desim import (
    SimConfig, estimate_tail_probabilities, pool_metrics, pooled_death_rates,
    simulate_mmn, simulate_pooled_jffs, simulate_separate, simulate_trajectory, trajectory_csv,
)
from hetlb.model import QueueState, SystemSpec, fig1_spec
from hetlb.policy import PolicyId, PolicyKind, water_filling_busy

MM1 = SystemSpec.from_arrays([1.0], [1.0], 1, 0.5)
SA = PolicyId(PolicyKind.SA_JSQ)
JSQ = PolicyId(PolicyKind.JSQ)


def test_mm1_response_time():
    m = simulate_separate(SimConfig(MM1, total_arrivals=1_000_000, seed=1))
    assert abs(m.mean_response_time - 2.0) <= 0.1
    # geometric tail P(Q >= l) = 0.5 ** l
    p = estimate_tail_probabilities(m, MM1)[0, :5]
    assert np.allclose(p, 0.5 ** np.arange(1, 6), atol=0.02)


def test_fig1_response_time_and_tail():
    m = simulate_separate(SimConfig(fig1_spec(500, 0.7), total_arrivals=300_000, seed=3))
    assert abs(m.mean_response_time - 0.52 / 0.7) <= 0.05 * 0.52 / 0.7
    assert m.tail_probabilities[:, 2].max() <= 0.02
    assert m.rate_gap_failures == 0 and m.rate_gap_checks >= m.event_count - 1


def test_light_load_uses_fast_pool():
    m = simulate_separate(SimConfig(fig1_spec(500, 0.01), total_arrivals=100_000, seed=2))
    assert abs(m.mean_response_time - 0.4) <= 0.04


def test_pooled_examples():
    m = simulate_pooled_jffs(SimConfig(MM1, total_arrivals=1_000_000, seed=4))
    assert abs(m.mean_response_time - 2.0) <= 0.1
    m = simulate_pooled_jffs(SimConfig(fig1_spec(500, 0.7), seed=4))
    assert abs(m.mean_jobs_scaled - 0.52) <= 0.02
    m = simulate_pooled_jffs(SimConfig(fig1_spec(50, 0.9), seed=4))
    assert m.mean_jobs_scaled <= 9.9


def test_mmn_examples():
    m = simulate_mmn(SimConfig(MM1, total_arrivals=1_000_000, seed=5))
    assert abs(m.mean_jobs_scaled - 1.0) <= 0.05
    spec = SystemSpec.from_arrays([1.0], [1.0], 100, 0.01)
    m = simulate_mmn(SimConfig(spec, total_arrivals=100_000, seed=5))
    assert abs(m.mean_jobs_scaled - 0.01) <= 0.001
    spec = SystemSpec.from_arrays([1.0], [1.0], 100, 0.5)
    m = simulate_mmn(SimConfig(spec, seed=5))
    assert m.mean_jobs_scaled <= 1.5


def test_empty_run_has_zero_tail():
    spec = fig1_spec(10, 1e-9)
    m = simulate_separate(SimConfig(spec, total_arrivals=1, warmup_fraction=0.0, seed=0))
    assert np.all(estimate_tail_probabilities(m, spec) == 0.0)


def test_determinism():
    cfg = SimConfig(fig1_spec(100, 0.8), policy=PolicyId(PolicyKind.SQ_D, (2,)),
                    total_arrivals=20_000, seed=11)
    a, b = simulate_separate(cfg), simulate_separate(cfg)
    assert a.mean_response_time == b.mean_response_time
    assert np.array_equal(a.tail_probabilities, b.tail_probabilities)
    assert a.event_count == b.event_count
    c = simulate_separate(SimConfig(cfg.spec, policy=cfg.policy, total_arrivals=20_000, seed=12))
    assert c.mean_response_time != a.mean_response_time


def test_littles_law_residual_shrinks():
    spec = fig1_spec(100, 0.8)
    res = []
    for t in (10_000, 100_000, 1_000_000):
        runs = [simulate_separate(SimConfig(spec, total_arrivals=t, seed=s)) for s in range(3)]
        res.append(np.mean([abs(r.mean_response_time - r.mean_jobs_scaled / spec.lam) for r in runs]))
    assert res[2] < res[0]
    assert res[2] < 0.01


def test_single_pool_policies_agree():
    spec = SystemSpec.from_arrays([1.0], [1.0], 50, 0.9)
    a = [simulate_separate(SimConfig(spec, SA, 50_000, seed=s)).mean_response_time for s in range(8)]
    b = [simulate_separate(SimConfig(spec, JSQ, 50_000, seed=100 + s)).mean_response_time
         for s in range(8)]
    assert stats.ttest_ind(a, b).pvalue > 0.01


def test_pooled_death_rates_are_water_filling():
    spec = fig1_spec(10, 0.5)
    rates = pooled_death_rates(spec)
    assert rates[0] == 0 and rates[5] == pytest.approx(6.875) and rates[10] == pytest.approx(10)
    for k in range(11):
        assert water_filling_busy(k, spec).sum() == k


def test_pool_metrics_weights():
    spec = fig1_spec(20, 0.6)
    runs = [simulate_separate(SimConfig(spec, total_arrivals=5_000, seed=s)) for s in range(3)]
    p = pool_metrics(runs)
    assert p.completed == sum(r.completed for r in runs)
    w = np.array([r.window for r in runs])
    assert p.mean_jobs_scaled == pytest.approx(np.dot(w, [r.mean_jobs_scaled for r in runs]) / w.sum())


def test_trajectory_shape_and_initial():
    spec = fig1_spec(20, 0.7)
    q0 = QueueState.uniform(spec, 2)
    traj = simulate_trajectory(spec, SA, [0.0, 1.0, 2.0], seed=0, initial=q0, depth=4)
    assert traj.shape == (3, 4, 2)
    assert np.allclose(traj[0, :2], 1.0) and np.allclose(traj[0, 2:], 0.0)
    assert trajectory_csv([0.0, 1.0, 2.0], traj).startswith("t,j,i,x\n")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["sa-jsq", "jsq", "sed", "sq:d=2", "sq2:1,1"]),
       st.floats(0.2, 0.95))
def test_tail_measure_is_valid(seed, pol, lam):
    spec = fig1_spec(20, lam)
    m = simulate_separate(SimConfig(spec, PolicyId.parse(pol), total_arrivals=2_000, seed=seed))
    x = m.stationary_tail.values
    assert np.all((x >= 0) & (x <= 1))
    assert np.all(np.diff(x, axis=0) <= 1e-12)
    assert m.rate_gap_failures == 0
    assert m.censored >= 0
