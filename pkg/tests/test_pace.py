import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsim.pace import (
    DiurnalCurve,
    PaceSteeringPolicy,
    PopulationStats,
    ReconnectWindow,
    bucket_counts,
    sample_arrival,
    stateless_uniform,
    suggest_window,
)

HOUR = 3_600_000


def test_curve_peak_ratio_and_mean():
    c = DiurnalCurve.from_peak_ratio(4.0, peak_hour=2)
    assert c.peak_ratio == pytest.approx(4.0)
    assert c.peak_hour == 2 and c.trough_hour == 14
    samples = [c.multiplier(t) for t in range(0, 24 * HOUR, 60_000)]
    assert np.mean(samples) == pytest.approx(c.mean, rel=1e-3)
    assert DiurnalCurve.flat().peak_ratio == 1.0


def test_disabled_policy_retries_immediately():
    pol = PaceSteeringPolicy(enabled=False)
    w = pol.suggest_window(PopulationStats(10**6, 10, 0), 5000, 1)
    assert (w.start, w.end) == (5000, 6000)


def test_spreading_period_tracks_rate():
    pol = PaceSteeringPolicy()
    stats = PopulationStats(100_000, 50.0, 0)
    # 100k active devices at 50 per second -> 2000 s between check-ins
    assert pol.spreading_period(stats, 0) == 2_000_000
    assert pol.spreading_period(PopulationStats(100, 50.0, 0), 0) == pol.min_period_ms
    assert pol.spreading_period(PopulationStats(10**9, 0.0, 0), 0) == pol.max_period_ms


def test_concentration_window_brackets_target():
    pol = PaceSteeringPolicy()
    stats = PopulationStats(200, 1.0, 600_000)
    w = pol.suggest_window(stats, 0, 3)
    assert w.contains(600_000) and w.width == pol.concentration_width_ms


def test_concentration_window_widens_in_trough():
    curve = DiurnalCurve.from_peak_ratio(4.0, peak_hour=2)
    pol = PaceSteeringPolicy()
    peak = pol.suggest_window(PopulationStats(200, 1.0, 2 * HOUR, curve), 0, 0)
    trough = pol.suggest_window(PopulationStats(200, 1.0, 14 * HOUR, curve), 0, 0)
    assert trough.width == pytest.approx(4 * peak.width, rel=0.01)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 10**7),
    st.floats(0.01, 1000),
    st.integers(0, 10**9),
    st.integers(0, 10**9),
    st.integers(0, 2**32),
    st.booleans(),
)
def test_window_is_never_in_the_past(active, rate, now, target, seed, enabled):
    stats = PopulationStats(active, rate, target)
    w = suggest_window(stats, now, seed, PaceSteeringPolicy(enabled=enabled))
    assert w.start >= now and w.end > w.start
    t = sample_arrival(w, seed)
    assert w.start <= t < w.end or w.width == 0


def test_sample_arrival_defers_until_eligible():
    w = ReconnectWindow(0, 100)
    assert sample_arrival(w, 1, lambda t: t + 1000) >= 1000
    assert sample_arrival(w, 1, lambda t: None) is None


def test_stateless_uniform_is_deterministic_and_spread():
    xs = [stateless_uniform(i, 7) for i in range(5000)]
    assert xs == [stateless_uniform(i, 7) for i in range(5000)]
    assert 0 <= min(xs) and max(xs) < 1
    assert abs(np.mean(xs) - 0.5) < 0.02


def test_bucket_counts():
    assert list(bucket_counts([0, 5, 10_000, 25_000])) == [2, 1, 1]
    assert bucket_counts([]).size == 0


def test_invalid_inputs():
    with pytest.raises(ValueError):
        ReconnectWindow(5, 5)
    with pytest.raises(ValueError):
        PopulationStats(-1, 1, 0)
