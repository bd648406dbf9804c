import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetlb.errors import (
    DepthExceeded, LambdaOutOfRange, NonIntegerPoolSize, PoolCountMismatch,
    StateError, UnnormalizedCapacity, UnsortedSpeeds,
)
from hetlb.model import (
    QueueState, SystemSpec, TailMeasure, fig1_spec, l1_distance,
    scaled_tail_sums, tail_measure_from_queues, validate_spec,
)


def test_validate_reference_farm():
    spec = fig1_spec(1000, 0.7)
    assert validate_spec(spec) is spec


def test_small_farm_pool_sizes():
    spec = fig1_spec(10, 0.5)
    assert spec.pool_sizes.tolist() == [2, 8]


def test_capacity_not_normalized():
    with pytest.raises(UnnormalizedCapacity):
        SystemSpec.from_arrays([2.0, 1.0], [0.25, 0.75], 10, 0.5)
    # 0.25*2 + 0.75*2/3 = 1, so this one is fine
    SystemSpec.from_arrays([2.0, 2 / 3], [0.25, 0.75], 4, 0.5)


@pytest.mark.parametrize("kwargs,err", [
    (dict(speeds=[2.5, 0.625], fractions=[0.2, 0.8], n_servers=7, lam=0.5), NonIntegerPoolSize),
    (dict(speeds=[0.625, 2.5], fractions=[0.8, 0.2], n_servers=10, lam=0.5), UnsortedSpeeds),
    (dict(speeds=[1.0, 1.0], fractions=[0.5, 0.5], n_servers=10, lam=0.5), UnsortedSpeeds),
    (dict(speeds=[2.5, 0.625], fractions=[0.2, 0.8], n_servers=10, lam=1.0), LambdaOutOfRange),
    (dict(speeds=[2.5, 0.625], fractions=[0.2, 0.8], n_servers=10, lam=0.0), LambdaOutOfRange),
])
def test_validation_errors(kwargs, err):
    with pytest.raises(err):
        SystemSpec.from_arrays(**kwargs)


def test_tail_measure_examples():
    spec = fig1_spec(10, 0.5)
    x = tail_measure_from_queues(QueueState.empty(spec), spec)
    assert np.all(x.values == 0)

    q = QueueState(([2, 0], [1] * 8))
    x = tail_measure_from_queues(q, spec, depth=4)
    assert x.x(1, 0) == 0.5 and x.x(2, 0) == 0.5
    assert x.x(1, 1) == 1.0 and x.x(2, 1) == 0.0
    assert x.x(0, 1) == 1.0 and x.x(99, 0) == 0.0

    x = tail_measure_from_queues(QueueState.uniform(spec, 3), spec, depth=6)
    assert np.all(x.values[:3] == 1) and np.all(x.values[3:] == 0)


def test_depth_exceeded():
    spec = fig1_spec(10, 0.5)
    with pytest.raises(DepthExceeded):
        tail_measure_from_queues(QueueState.uniform(spec, 5), spec, depth=4)


def test_queue_state_shape_checks():
    spec = fig1_spec(10, 0.5)
    with pytest.raises(StateError):
        QueueState(([1, 2, 3], [0] * 8)).check(spec)
    with pytest.raises(PoolCountMismatch):
        QueueState(([0] * 10,)).check(spec)
    with pytest.raises(StateError):
        QueueState(([-1, 0], [0] * 8))


def test_tail_measure_invariants():
    with pytest.raises(StateError):
        TailMeasure(np.array([[0.5], [0.7]]))
    with pytest.raises(StateError):
        TailMeasure(np.array([[1.2]]))


def test_scaled_tail_sums():
    spec = fig1_spec(10, 0.7)
    assert np.all(scaled_tail_sums(TailMeasure.zeros(2), spec) == 0)
    xs = TailMeasure.from_levels({(1, 0): 1.0, (1, 1): 0.4}, 2)
    assert scaled_tail_sums(xs, spec)[0] == pytest.approx(0.52, abs=1e-15)
    x = TailMeasure.from_levels({(1, 0): 1.0, (2, 0): 1.0}, 2)
    v = scaled_tail_sums(x, spec)
    assert v[0] == pytest.approx(0.4) and v[1] == pytest.approx(0.2) and v[2] == 0


def test_l1_distance_examples():
    a = TailMeasure.from_levels({(1, 0): 0.8}, 2)
    b = TailMeasure.from_levels({(1, 0): 1.0, (1, 1): 0.4}, 2, depth=3)
    norm, total = l1_distance(a, b)
    assert norm == pytest.approx(0.4) and total == pytest.approx(0.6)
    assert l1_distance(a, a) == (0.0, 0.0)
    assert l1_distance(TailMeasure.zeros(2), b)[1] == pytest.approx(1.4)
    with pytest.raises(PoolCountMismatch):
        l1_distance(a, TailMeasure.zeros(3))


def test_serialisation_round_trip():
    spec = fig1_spec(10, 0.5)
    q = QueueState(([2, 0], [1, 0, 3, 0, 0, 1, 1, 4]))
    q2 = QueueState.from_csv(q.to_csv())
    assert all(np.array_equal(a, b) for a, b in zip(q.queues, q2.queues))
    x = tail_measure_from_queues(q, spec, depth=5)
    assert np.array_equal(TailMeasure.from_csv(x.to_csv()).values, x.values)
    assert np.array_equal(TailMeasure.from_json(x.to_json()).values, x.values)
    assert json.loads(x.to_json())["depth"] == 5


queue_states = st.tuples(
    st.lists(st.integers(0, 12), min_size=2, max_size=2),
    st.lists(st.integers(0, 12), min_size=8, max_size=8),
)


@given(queue_states)
def test_empirical_measure_monotone_and_counts(qs):
    spec = fig1_spec(10, 0.5)
    q = QueueState(qs)
    x = tail_measure_from_queues(q, spec, depth=16)
    assert np.all(np.diff(x.values, axis=0) <= 0)
    jobs = sum(n * x.values[:, j].sum() for j, n in enumerate(spec.pool_sizes))
    assert round(jobs) == q.total_jobs and abs(jobs - q.total_jobs) < 1e-9
    assert scaled_tail_sums(x, spec)[0] == pytest.approx(q.total_jobs / 10)


measure = st.lists(st.floats(0, 1), min_size=6, max_size=6).map(
    lambda v: TailMeasure(np.sort(np.array(v).reshape(3, 2), axis=0)[::-1]))


@settings(max_examples=200)
@given(measure, measure, measure)
def test_l1_metric_axioms(a, b, c):
    for k in (0, 1):
        assert l1_distance(a, b)[k] == pytest.approx(l1_distance(b, a)[k])
        assert l1_distance(a, c)[k] <= l1_distance(a, b)[k] + l1_distance(b, c)[k] + 1e-12
        assert l1_distance(a, b)[k] >= 0
