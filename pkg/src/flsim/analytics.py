"""Session telemetry, shape distributions, per-round metrics and threshold alerts."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Optional, Sequence

from .protocol.session import LEGEND, TERMINAL_SYMBOLS

ALPHABET = frozenset(LEGEND)


class OutOfOrder(Exception):
    pass


@dataclass(frozen=True, order=True)
class SessionEvent:
    sim_time: int
    device_id: int
    round_id: str
    symbol: str

    def __post_init__(self):
        if self.symbol not in ALPHABET:
            raise ValueError(f"unknown session symbol {self.symbol!r}")

    def to_line(self) -> str:
        return f"{self.sim_time} {self.device_id} {self.round_id} {self.symbol}\n"

    @classmethod
    def from_line(cls, line: str) -> "SessionEvent":
        t, dev, rid, sym = line.split()
        return cls(int(t), int(dev), rid, sym)


def read_event_log(lines: Iterable[str]) -> list[SessionEvent]:
    return [SessionEvent.from_line(ln) for ln in lines if ln.strip()]


def encode_session(events: Sequence[SessionEvent]) -> str:
    if not events:
        return ""
    first = events[0]
    prev = first.sim_time
    for e in events:
        if e.device_id != first.device_id or e.round_id != first.round_id:
            raise OutOfOrder("events belong to different sessions")
        if e.sim_time < prev:
            raise OutOfOrder(f"event at {e.sim_time} follows event at {prev}")
        prev = e.sim_time
    return "".join(e.symbol for e in events)


def group_sessions(events: Iterable[SessionEvent]) -> dict[tuple[int, str], list[SessionEvent]]:
    """Group a log into sessions keyed by ``(device_id, round_id)`` in log order."""
    out: dict[tuple[int, str], list[SessionEvent]] = {}
    for e in events:
        out.setdefault((e.device_id, e.round_id), []).append(e)
    return out


def session_shapes(events: Iterable[SessionEvent]) -> dict[tuple[int, str], str]:
    return {key: encode_session(evs) for key, evs in group_sessions(events).items()}


@dataclass(frozen=True)
class ShapeCount:
    count: int
    percent: int
    fraction: float


ShapeDistribution = dict  # shape -> ShapeCount, most frequent first


def distribution_of_shapes(shapes: Iterable[str]) -> ShapeDistribution:
    counts: dict[str, int] = defaultdict(int)
    for s in shapes:
        counts[s] += 1
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {s: ShapeCount(c, int(round(100 * c / total)), c / total) for s, c in ordered}


def shape_distribution(log: Iterable[SessionEvent]) -> ShapeDistribution:
    return distribution_of_shapes(session_shapes(log).values())


def completed_sessions(events: Iterable[SessionEvent]) -> dict[tuple[int, str], str]:
    """Only sessions that reached a terminal symbol."""
    return {k: s for k, s in session_shapes(events).items() if s and s[-1] in TERMINAL_SYMBOLS}


# -- server-side trace --------------------------------------------------------

SERVER_EVENT_KINDS = (
    "open",  # selection opened
    "rejected",  # check-in turned away while this round was selecting
    "configure",  # configuration began; value = configured target
    "forward",  # device forwarded to an aggregator
    "reporting",  # reporting phase began
    "report_accepted",
    "report_rejected",
    "dropped",
    "aborted",
    "bytes_down",
    "bytes_up",
    "close",  # value = outcome code
)

OUTCOMES = ("completed", "abandoned", "failed")


@dataclass(frozen=True)
class ServerEvent:
    time: int
    round_id: str
    kind: str
    device_id: int = -1
    value: float = 0.0


@dataclass
class RoundRecord:
    round_id: str
    outcome: str = "open"
    opened_at: int = -1
    closed_at: int = -1
    accepted: int = 0
    rejected: int = 0
    completed: int = 0
    aborted: int = 0
    late_reports: int = 0
    dropped: int = 0
    selection_ms: int = 0
    configuration_ms: int = 0
    reporting_ms: int = 0
    bytes_down: int = 0
    bytes_up: int = 0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)


def round_metrics(trace: Iterable[ServerEvent]) -> list[RoundRecord]:
    """Fold a server trace into one record per round id, ordered by opening time."""
    recs: dict[str, RoundRecord] = {}
    phase_start: dict[str, dict[str, int]] = defaultdict(dict)
    for ev in trace:
        r = recs.get(ev.round_id)
        if r is None:
            r = recs[ev.round_id] = RoundRecord(ev.round_id)
        k = ev.kind
        if k == "open":
            r.opened_at = ev.time
            phase_start[ev.round_id]["selection"] = ev.time
        elif k == "rejected":
            r.rejected += 1
        elif k == "configure":
            phase_start[ev.round_id]["configuration"] = ev.time
        elif k == "forward":
            r.accepted += 1
        elif k == "reporting":
            phase_start[ev.round_id]["reporting"] = ev.time
        elif k == "report_accepted":
            r.completed += 1
        elif k == "report_rejected":
            r.late_reports += 1
        elif k == "aborted":
            r.aborted += 1
        elif k == "dropped":
            r.dropped += 1
        elif k == "bytes_down":
            r.bytes_down += int(ev.value)
        elif k == "bytes_up":
            r.bytes_up += int(ev.value)
        elif k == "close":
            r.outcome = OUTCOMES[int(ev.value)]
            r.closed_at = ev.time
        else:
            raise ValueError(f"unknown server event kind {k!r}")
    for rid, r in recs.items():
        ps = phase_start[rid]
        sel, conf, rep = ps.get("selection"), ps.get("configuration"), ps.get("reporting")
        end = r.closed_at
        if sel is not None:
            r.selection_ms = (conf if conf is not None else end) - sel
        if conf is not None:
            r.configuration_ms = (rep if rep is not None else end) - conf
        if rep is not None and end >= 0:
            r.reporting_ms = end - rep
        if r.outcome in ("abandoned", "failed"):
            # accepted reports of a round that never committed are discarded
            r.aborted += r.completed
            r.completed = 0
    return sorted(recs.values(), key=lambda r: (r.opened_at, r.round_id))


# -- health records -----------------------------------------------------------

HEALTH_FIELDS = (
    "device_state",
    "run_duration_ms",
    "memory_proxy_bytes",
    "error_code",
    "model_version",
    "os_version",
    "runtime_version",
)


@dataclass(frozen=True)
class HealthRecord:
    """Scalar health telemetry only: no identifiers, no example payloads."""

    device_state: str
    run_duration_ms: int
    memory_proxy_bytes: int
    error_code: str
    model_version: int
    os_version: str
    runtime_version: int

    def as_row(self) -> dict:
        return asdict(self)


# -- windowed series and alerts ----------------------------------------------

@dataclass(frozen=True)
class WindowStat:
    start: int
    rounds: int
    completed_rounds: int
    completion_rate: float
    configured: int
    dropped: int
    dropout_rate: float


def windowed_series(records: Iterable[RoundRecord], window_ms: int = 3_600_000, origin: int = 0) -> list[WindowStat]:
    """Bucket finished rounds by closing time into fixed windows."""
    buckets: dict[int, list[RoundRecord]] = defaultdict(list)
    for r in records:
        if r.closed_at < 0:
            continue
        buckets[(r.closed_at - origin) // window_ms].append(r)
    if not buckets:
        return []
    out = []
    for b in range(min(buckets), max(buckets) + 1):
        rs = buckets.get(b, [])
        done = sum(1 for r in rs if r.outcome == "completed")
        conf = sum(r.accepted for r in rs)
        drop = sum(r.dropped for r in rs)
        out.append(
            WindowStat(
                start=origin + b * window_ms,
                rounds=len(rs),
                completed_rounds=done,
                completion_rate=done / len(rs) if rs else math.nan,
                configured=conf,
                dropped=drop,
                dropout_rate=drop / conf if conf else math.nan,
            )
        )
    return out


@dataclass(frozen=True)
class Monitor:
    metric: str
    min: Optional[float] = None
    max: Optional[float] = None


DEFAULT_MONITORS = (
    Monitor("completion_rate", min=0.5),
    Monitor("dropout_rate", max=0.15),
)


@dataclass(frozen=True)
class Alert:
    window_start: int
    metric: str
    value: float
    threshold: float
    direction: str  # "below" or "above"


def alert_check(series: Sequence, monitors: Iterable[Monitor] = DEFAULT_MONITORS) -> list[Alert]:
    """One alert per (window, monitor) whose metric crosses its threshold.

    ``series`` items expose ``start`` and the monitored attribute (``WindowStat`` or
    any mapping-like record with those keys). NaN values never alert.
    """
    alerts = []
    monitors = list(monitors)
    for w in series:
        get = w.get if isinstance(w, Mapping) else lambda k, _w=w: getattr(_w, k)
        for m in monitors:
            v = get(m.metric)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                continue
            if m.min is not None and v < m.min:
                alerts.append(Alert(get("start"), m.metric, float(v), m.min, "below"))
            if m.max is not None and v > m.max:
                alerts.append(Alert(get("start"), m.metric, float(v), m.max, "above"))
    return alerts


# -- sinks --------------------------------------------------------------------

class Telemetry:
    """Append-only sinks written by devices and server actors during a run."""

    def __init__(self):
        self.sessions: list[SessionEvent] = []
        self.server: list[ServerEvent] = []
        self.health: list[HealthRecord] = []
        self.checkins: list[int] = []
        self.traffic: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])

    def session(self, t: int, device_id: int, round_id: str, symbol: str) -> None:
        self.sessions.append(SessionEvent(t, device_id, round_id, symbol))

    def event(self, t: int, round_id: str, kind: str, device_id: int = -1, value: float = 0.0) -> None:
        self.server.append(ServerEvent(t, round_id, kind, device_id, value))

    def bytes(self, direction: str, message: str, size: int) -> None:
        cell = self.traffic[(direction, message)]
        cell[0] += 1
        cell[1] += size

    def event_log(self) -> str:
        return "".join(e.to_line() for e in self.sessions)
