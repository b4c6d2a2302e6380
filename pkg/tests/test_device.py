import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from flsim.device import (
    NEVER,
    AlwaysAvailable,
    CostModel,
    DeviceError,
    DeviceProfile,
    DiurnalThreshold,
    ExampleStore,
    IntervalSchedule,
    Job,
    TenantQueue,
    attest,
    calibrate_hazard,
    check_eligibility,
    execute_task,
    health_record,
    interruption_probability,
    maintain_store,
    tenant_schedule,
)
from flsim.fedavg import ModelParams, ModelUpdate
from flsim.pace import DiurnalCurve
from flsim.plans import DataSelector, generate_plan, task_config_from_dict

DAY = 86_400_000
HOUR = 3_600_000


def _store(n=10, dim=2, capacity=1000, expiration=None):
    X = np.arange(n * dim, dtype=float).reshape(n, dim)
    meta = [{"app": "a" if i % 2 else "b"} for i in range(n)]
    return ExampleStore(X, np.arange(n, dtype=float), np.arange(n) * 1000, meta, capacity, expiration)


def test_store_selection_and_maintenance():
    s = _store()
    X, y = s.select(DataSelector(equals=(("app", "a"),)), 10_000)
    assert list(y) == [1, 3, 5, 7, 9]
    _, y = s.select(DataSelector(max_age_ms=3000, limit=2), 10_000)
    assert list(y) == [7, 8]
    kept = maintain_store(_store(capacity=4), 0)
    assert list(kept.labels) == [6, 7, 8, 9]
    fresh = maintain_store(_store(expiration=2500), 10_000)
    assert list(fresh.labels) == [8, 9]
    assert len(s.append(np.zeros((2, 2)), [0, 0], [0, 0])) == 12
    with pytest.raises(ValueError):
        ExampleStore(np.zeros((2, 2)), np.zeros(3), np.zeros(2))


def test_interval_schedule():
    sched = IntervalSchedule(((HOUR, 2 * HOUR), (2 * HOUR, 3 * HOUR)), daily=True)
    assert not sched.is_available(0) and sched.is_available(HOUR)
    assert sched.next_available(0) == HOUR
    assert sched.available_until(HOUR + 5) == 3 * HOUR  # touching intervals merge
    assert sched.next_available(4 * HOUR) == DAY + HOUR
    with pytest.raises(ValueError):
        IntervalSchedule(((0, 10), (5, 20)))
    assert AlwaysAvailable().available_until(123) == NEVER


def test_diurnal_threshold_fleet_ratio():
    curve = DiurnalCurve.from_peak_ratio(4.0, peak_hour=2)
    us = (np.arange(2000) + 0.5) / 2000
    scheds = [DiurnalThreshold(float(u), curve) for u in us]
    peak = sum(s.is_available(2 * HOUR) for s in scheds)
    trough = sum(s.is_available(14 * HOUR) for s in scheds)
    assert peak / len(scheds) == pytest.approx(0.8, abs=0.01)
    assert peak / trough == pytest.approx(4.0, rel=0.03)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.0, 0.99), st.integers(0, 2 * DAY))
@example(0.5, 0)  # level lands exactly on an hourly knot
def test_diurnal_threshold_transitions_are_consistent(u, t):
    s = DiurnalThreshold(u, DiurnalCurve.from_peak_ratio(4.0))
    nxt = s.next_available(t)
    if nxt is not None:
        assert nxt >= t and s.is_available(nxt)
        assert nxt == t or not s.is_available(nxt - 1)
    if s.is_available(t):
        end = s.available_until(t)
        assert end > t
        if end != NEVER:
            assert not s.is_available(end) and s.is_available(end - 1)


def test_hazard_calibration_matches_target():
    durations = [30_000, 60_000, 120_000]
    h = calibrate_hazard(0.1, durations)
    assert np.mean([interruption_probability(h, d) for d in durations]) == pytest.approx(0.1, abs=1e-9)
    assert calibrate_hazard(0.0, durations) == 0.0
    # one minute at hazard h interrupts with probability h
    assert interruption_probability(0.2, 60_000) == pytest.approx(0.2)


def _plan(**over):
    d = {"population_name": "p", "task_name": "t", "code_reviewed": True, "model": {"dim": 2}}
    d.update(over)
    return generate_plan(task_config_from_dict(d))


def test_execute_task_outcomes():
    plan = _plan()
    w = ModelParams.zeros(2)
    rng = np.random.default_rng(0)
    ok = execute_task(DeviceProfile(1), plan, w, _store(), 0, rng, CostModel(100))
    assert ok.outcome == "ok" and ok.duration_ms == 1000 and isinstance(ok.result, ModelUpdate)
    assert ok.symbol == "]"
    slow = execute_task(DeviceProfile(1, speed_factor=0.5), plan, w, _store(), 0, rng, CostModel(100))
    assert slow.duration_ms == 2000
    doomed = execute_task(DeviceProfile(1, dropout_hazard=1.0), plan, w, _store(), 0, rng)
    assert doomed.outcome == "interrupted" and doomed.fail_at_ms == 0
    broken = execute_task(DeviceProfile(1, error_rate=1.0), plan, w, _store(), 0, rng)
    assert broken.outcome == "error" and broken.symbol == "*"
    empty = execute_task(DeviceProfile(1), plan, w, ExampleStore.empty(2), 0, rng)
    assert empty.outcome == "no_examples"
    leaving = DeviceProfile(1, schedule=IntervalSchedule(((0, 500),)))
    assert execute_task(leaving, plan, w, _store(), 0, rng, CostModel(100)).outcome == "interrupted"


def test_profile_validation_and_attestation():
    with pytest.raises(ValueError):
        DeviceProfile(1, speed_factor=0)
    with pytest.raises(ValueError):
        DeviceProfile(1, error_rate=2)
    assert attest(DeviceProfile(1)) and not attest(DeviceProfile(1, genuine=False))
    assert check_eligibility(DeviceProfile(1), 0)
    rec = health_record(DeviceProfile(1), "idle", 5, 6, "", 3)
    assert rec.runtime_version == 3 and rec.os_version == "os-12"


def test_tenant_queue_runs_one_job_at_a_time():
    q = TenantQueue()
    a, b = Job("p1", 0), Job("p2", 1)
    q.enqueue(a)
    q.enqueue(b)
    assert tenant_schedule(q, 0, eligible=False) is None
    assert tenant_schedule(q, 0) is a
    assert tenant_schedule(q, 0) is None
    with pytest.raises(DeviceError):
        q.complete(b)
    q.complete(a)
    q.discard(b)
    assert tenant_schedule(q, 1) is None and q.history == [("p1", "completed")]
    c = Job("p1", 2)
    q.enqueue(c)
    tenant_schedule(q, 2)
    q.discard(c)
    assert q.running is None and q.history[-1] == ("p1", "aborted")


def test_cost_model_floor():
    assert CostModel(0.0).duration(10, 1, 1.0) == 1
    assert math.isclose(CostModel(2.0).duration(10, 2, 2.0), 20)
