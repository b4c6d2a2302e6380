"""Operational profile tables computed from a run's artifact directory."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..analytics import group_sessions, read_event_log
from ..protocol.session import TERMINAL_SYMBOLS


@dataclass
class Profile:
    completion: list  # (window_start, rounds, completion_rate)
    per_round: list  # (round_id, outcome, completed, aborted, dropped)
    round_durations_ms: np.ndarray
    participation_ms: np.ndarray
    participation_cap_ms: int
    traffic: list  # (message, direction, count, bytes)
    bytes_down: int
    bytes_up: int

    @property
    def traffic_ratio(self) -> float:
        return self.bytes_down / self.bytes_up if self.bytes_up else float("inf")


def _rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _histogram(values: np.ndarray, bins: int = 10) -> list[tuple[float, float, int]]:
    if values.size == 0:
        return []
    counts, edges = np.histogram(values, bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def participation_times(events) -> np.ndarray:
    """Time from plan download to the terminal symbol, per finished session."""
    out = []
    for evs in group_sessions(events).values():
        start = next((e.sim_time for e in evs if e.symbol == "v"), None)
        if start is not None and evs[-1].symbol in TERMINAL_SYMBOLS:
            out.append(evs[-1].sim_time - start)
    return np.asarray(sorted(out), dtype=np.int64)


def report_profile(run_dir) -> Profile:
    run = Path(run_dir)
    manifest = json.loads((run / "manifest.json").read_text())
    windows = _rows(run / "windows.csv")
    rounds = _rows(run / "rounds.csv")
    traffic = _rows(run / "traffic.csv")
    events = read_event_log((run / "events.log").read_text().splitlines())

    tasks = manifest.get("config", {}).get("tasks") or [{}]
    cap = max(int((t.get("round_params") or {}).get("report_window", 300_000)) for t in tasks)
    durations = [int(r["closed_at"]) - int(r["opened_at"]) for r in rounds if int(r["closed_at"]) >= 0]
    down = sum(int(t["bytes"]) for t in traffic if t["direction"] == "down")
    up = sum(int(t["bytes"]) for t in traffic if t["direction"] == "up")
    return Profile(
        completion=[(int(w["start"]), int(w["rounds"]), float(w["completion_rate"])) for w in windows],
        per_round=[(r["round_id"], r["outcome"], int(r["completed"]), int(r["aborted"]), int(r["dropped"])) for r in rounds],
        round_durations_ms=np.asarray(sorted(durations), dtype=np.int64),
        participation_ms=participation_times(events),
        participation_cap_ms=cap,
        traffic=[(t["message"], t["direction"], int(t["count"]), int(t["bytes"])) for t in traffic],
        bytes_down=down,
        bytes_up=up,
    )


def write_profile(profile: Profile, run_dir) -> list[Path]:
    run = Path(run_dir)
    files = []

    def put(name, header, rows):
        path = run / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        files.append(path)

    put("profile_completion.csv", ["window_start", "rounds", "completion_rate"], profile.completion)
    put("profile_rounds.csv", ["round_id", "outcome", "completed", "aborted", "dropped"], profile.per_round)
    put("profile_round_duration.csv", ["lo_ms", "hi_ms", "rounds"], _histogram(profile.round_durations_ms))
    put("profile_participation.csv", ["lo_ms", "hi_ms", "sessions"], _histogram(profile.participation_ms))
    put(
        "profile_traffic.csv",
        ["message", "direction", "count", "bytes"],
        sorted(profile.traffic) + [("TOTAL", "down", "", profile.bytes_down), ("TOTAL", "up", "", profile.bytes_up)],
    )
    return files


def format_profile(profile: Profile) -> str:
    lines = []
    rates = [c[2] for c in profile.completion if not np.isnan(c[2])]
    lines.append(f"windows: {len(profile.completion)}  mean completion rate: {np.mean(rates):.3f}" if rates else "windows: 0")
    outcomes: dict[str, int] = {}
    for r in profile.per_round:
        outcomes[r[1]] = outcomes.get(r[1], 0) + 1
    lines.append("rounds: " + ", ".join(f"{k}={v}" for k, v in sorted(outcomes.items())))
    if profile.round_durations_ms.size:
        d = profile.round_durations_ms
        lines.append(f"round duration ms: median {int(np.median(d))}  p95 {int(np.percentile(d, 95))}  max {int(d.max())}")
    if profile.participation_ms.size:
        p = profile.participation_ms
        lines.append(f"participation ms: median {int(np.median(p))}  max {int(p.max())}  cap {profile.participation_cap_ms}")
    lines.append(f"traffic: down {profile.bytes_down} B  up {profile.bytes_up} B  ratio {profile.traffic_ratio:.2f}")
    return "\n".join(lines)
