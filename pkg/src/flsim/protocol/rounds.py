"""Server-side round state machine: Selection, Configuration, Reporting."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable


class Phase(str, enum.Enum):
    SELECTION = "selection"
    CONFIGURATION = "configuration"
    REPORTING = "reporting"
    COMPLETED = "completed"
    ABANDONED = "abandoned"

    @property
    def terminal(self) -> bool:
        return self in (Phase.COMPLETED, Phase.ABANDONED)


_ALLOWED = {
    Phase.SELECTION: {Phase.CONFIGURATION, Phase.ABANDONED},
    Phase.CONFIGURATION: {Phase.REPORTING, Phase.ABANDONED},
    Phase.REPORTING: {Phase.COMPLETED, Phase.ABANDONED},
    Phase.COMPLETED: set(),
    Phase.ABANDONED: set(),
}


class IllegalPhase(Exception):
    pass


def overselect_count(goal_count: int, factor: float) -> int:
    # round() strips float noise such as 100 * 1.3 == 130.00000000000003
    return math.ceil(round(goal_count * factor, 9))


@dataclass(frozen=True)
class RoundParams:
    goal_count: int
    overselect_factor: float = 1.3
    min_fraction: float = 0.8
    selection_timeout: int = 60_000
    report_window: int = 300_000
    dropout_tolerance: float = 0.25

    def __post_init__(self):
        if self.goal_count < 1:
            raise ValueError("goal_count must be positive")
        if self.overselect_factor < 1:
            raise ValueError("overselect_factor must be >= 1")
        if not 0 < self.min_fraction <= 1:
            raise ValueError("min_fraction must be in (0, 1]")
        if self.min_fraction * self.goal_count < 1:
            raise ValueError("min_fraction * goal_count must be >= 1")
        if self.selection_timeout <= 0 or self.report_window <= 0:
            raise ValueError("timeouts must be positive")
        if not 0 <= self.dropout_tolerance < 1:
            raise ValueError("dropout_tolerance must be in [0, 1)")

    @property
    def target_count(self) -> int:
        return overselect_count(self.goal_count, self.overselect_factor)

    @property
    def min_count(self) -> int:
        return math.ceil(round(self.min_fraction * self.goal_count, 9))


def make_round_id(round_number: int, epoch: int, serial: int) -> str:
    """Round ids are ``<round>-<coordinator epoch>-<serial>``.

    The serial counts selections opened by one coordinator, so a retry of the same
    round number, or a restart under a new epoch, never reuses an id.
    """
    return f"{round_number}-{epoch}-{serial}"


def parse_round_id(round_id: str) -> tuple[int, int, int]:
    a, b, c = round_id.split("-")
    return int(a), int(b), int(c)


@dataclass(frozen=True)
class RoundState:
    round_id: str
    phase: Phase
    target: int
    opened_at: int
    selection_deadline: int
    configured: int = 0
    participants: frozenset = frozenset()
    reported: frozenset = frozenset()
    lost: frozenset = frozenset()
    reporting_deadline: int | None = None
    phase_times: tuple = field(default_factory=tuple)

    @classmethod
    def open(cls, round_id: str, params: RoundParams, now: int) -> "RoundState":
        return cls(
            round_id=round_id,
            phase=Phase.SELECTION,
            target=params.target_count,
            opened_at=now,
            selection_deadline=now + params.selection_timeout,
            phase_times=((Phase.SELECTION, now),),
        )

    def _to(self, phase: Phase, now: int, **changes) -> "RoundState":
        if phase not in _ALLOWED[self.phase]:
            raise IllegalPhase(f"{self.phase.value} -> {phase.value}")
        return replace(self, phase=phase, phase_times=self.phase_times + ((phase, now),), **changes)

    def started(self, phase: Phase) -> int | None:
        for p, t in self.phase_times:
            if p is phase:
                return t
        return None

    def configure(self, count: int, now: int) -> "RoundState":
        return self._to(Phase.CONFIGURATION, now, configured=min(count, self.target))

    def begin_reporting(self, participants: Iterable[int], now: int, params: RoundParams) -> "RoundState":
        members = frozenset(participants)
        if len(members) > self.target:
            raise IllegalPhase(f"{len(members)} participants exceed target {self.target}")
        return self._to(
            Phase.REPORTING,
            now,
            participants=members,
            configured=len(members),
            reporting_deadline=now + params.report_window,
        )

    def record_report(self, device_id: int) -> "RoundState":
        if self.phase is not Phase.REPORTING:
            raise IllegalPhase(f"report in phase {self.phase.value}")
        if device_id not in self.participants or device_id in self.lost:
            raise IllegalPhase(f"device {device_id} is not an active participant")
        return replace(self, reported=self.reported | {device_id})

    def record_loss(self, device_ids: Iterable[int]) -> "RoundState":
        ids = frozenset(device_ids) & self.participants
        # a loss after reporting revokes the report (its aggregator went away)
        return replace(self, lost=self.lost | ids, reported=self.reported - ids)

    def abandon(self, now: int) -> "RoundState":
        return self._to(Phase.ABANDONED, now)

    @property
    def outstanding(self) -> int:
        return len(self.participants) - len(self.reported) - len(self.lost)


def selection_tick(state: RoundState, connected: int, params: RoundParams, now: int) -> RoundState:
    if state.phase is not Phase.SELECTION:
        raise IllegalPhase(f"selection_tick in phase {state.phase.value}")
    if connected >= state.target:
        return state.configure(state.target, now)
    if now >= state.selection_deadline:
        if connected >= params.min_count:
            return state.configure(connected, now)
        return state.abandon(now)
    return state


def reporting_tick(state: RoundState, params: RoundParams, now: int) -> RoundState:
    if state.phase is not Phase.REPORTING:
        raise IllegalPhase(f"reporting_tick in phase {state.phase.value}")
    if len(state.reported) >= params.goal_count:
        return state._to(Phase.COMPLETED, now)
    if now >= state.reporting_deadline:
        return state.abandon(now)
    if len(state.lost) > params.dropout_tolerance * len(state.participants):
        return state.abandon(now)
    if len(state.reported) + state.outstanding < params.goal_count:
        return state.abandon(now)
    return state
