import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsim.analytics import (
    HEALTH_FIELDS,
    HealthRecord,
    Monitor,
    OutOfOrder,
    ServerEvent,
    SessionEvent,
    Telemetry,
    alert_check,
    completed_sessions,
    distribution_of_shapes,
    encode_session,
    read_event_log,
    round_metrics,
    shape_distribution,
    windowed_series,
)


def _log(*rows):
    return [SessionEvent(t, d, r, s) for t, d, r, s in rows]


def test_encode_and_group_sessions():
    log = _log(
        (1, 5, "1-1-1", "-"),
        (2, 6, "1-1-1", "-"),
        (3, 5, "1-1-1", "v"),
        (4, 6, "1-1-1", "v"),
        (5, 5, "1-1-1", "["),
        (6, 6, "1-1-1", "*"),
    )
    dist = shape_distribution(log)
    assert set(dist) == {"-v[", "-v*"}
    assert completed_sessions(log) == {(6, "1-1-1"): "-v*"}


def test_encode_rejects_mixed_or_unordered():
    with pytest.raises(OutOfOrder):
        encode_session(_log((1, 1, "a", "-"), (2, 2, "a", "v")))
    with pytest.raises(OutOfOrder):
        encode_session(_log((5, 1, "a", "-"), (2, 1, "a", "v")))
    with pytest.raises(ValueError):
        SessionEvent(0, 1, "a", "x")


def test_distribution_percentages():
    dist = distribution_of_shapes(["-v[]+^"] * 3 + ["-v[!"])
    assert list(dist) == ["-v[]+^", "-v[!"]
    assert dist["-v[]+^"].percent == 75 and dist["-v[!"].fraction == 0.25


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10**9), st.integers(0, 10**6), st.sampled_from("-v[]+^#!*")), max_size=30))
def test_event_log_roundtrip(rows):
    tel = Telemetry()
    for t, d, s in rows:
        tel.session(t, d, f"{d % 3}-1-1", s)
    assert read_event_log(tel.event_log().splitlines()) == tel.sessions


def _ev(t, rid, kind, dev=-1, value=0.0):
    return ServerEvent(t, rid, kind, dev, value)


def test_round_metrics_fold():
    trace = [
        _ev(0, "1-1-1", "open"),
        _ev(10, "1-1-1", "rejected", 4),
        _ev(20, "1-1-1", "configure", value=3),
        _ev(21, "1-1-1", "forward", 1),
        _ev(21, "1-1-1", "forward", 2),
        _ev(21, "1-1-1", "forward", 3),
        _ev(25, "1-1-1", "reporting"),
        _ev(40, "1-1-1", "report_accepted", 1),
        _ev(41, "1-1-1", "report_accepted", 2),
        _ev(42, "1-1-1", "close", value=0),
        _ev(50, "1-1-1", "report_rejected", 3),
        _ev(100, "2-1-2", "open"),
        _ev(150, "2-1-2", "configure"),
        _ev(151, "2-1-2", "forward", 1),
        _ev(160, "2-1-2", "reporting"),
        _ev(170, "2-1-2", "report_accepted", 1),
        _ev(200, "2-1-2", "close", value=1),
    ]
    a, b = round_metrics(trace)
    assert (a.outcome, a.accepted, a.completed, a.rejected, a.late_reports) == ("completed", 3, 2, 1, 1)
    assert (a.selection_ms, a.configuration_ms, a.reporting_ms) == (20, 5, 17)
    # reports of an abandoned round are discarded, not counted as completions
    assert (b.outcome, b.completed, b.aborted) == ("abandoned", 0, 1)
    with pytest.raises(ValueError):
        round_metrics([_ev(0, "x", "bogus")])


def test_windowed_series_and_alerts():
    trace = []
    for i in range(4):
        rid = f"{i + 1}-1-{i + 1}"
        trace += [_ev(i * 1000, rid, "open"), _ev(i * 1000 + 1, rid, "forward", 1)]
        trace += [_ev(i * 1000 + 2, rid, "dropped", 1)] if i == 3 else []
        trace += [_ev(i * 1000 + 500, rid, "close", value=0 if i < 2 else 1)]
    series = windowed_series(round_metrics(trace), window_ms=2000)
    assert [(w.rounds, w.completion_rate) for w in series] == [(2, 1.0), (2, 0.0)]
    assert series[1].dropout_rate == 0.5
    alerts = alert_check(series)
    assert {(a.window_start, a.metric, a.direction) for a in alerts} == {
        (2000, "completion_rate", "below"),
        (2000, "dropout_rate", "above"),
    }
    assert alert_check([{"start": 0, "x": math.nan}], [Monitor("x", min=1)]) == []


def test_health_record_has_no_identifiers():
    assert "device_id" not in HEALTH_FIELDS
    rec = HealthRecord("idle", 10, 1024, "", 3, "os-1", 3)
    assert set(rec.as_row()) == set(HEALTH_FIELDS)


def test_traffic_counters():
    tel = Telemetry()
    tel.bytes("down", "Configure", 100)
    tel.bytes("down", "Configure", 50)
    assert tel.traffic[("down", "Configure")] == [2, 150]
