"""Messages exchanged between server actors (not part of the device wire protocol)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from ..pace import PopulationStats
from .actors import ActorRef


# coordinator <-> selectors

@dataclass(frozen=True)
class CoordinatorHello:
    coordinator: ActorRef
    epoch: int


@dataclass(frozen=True)
class SelectorStatus:
    index: int
    selector: ActorRef
    held: int
    round_id: Optional[str]
    epoch: int


@dataclass(frozen=True)
class OpenSelection:
    round_id: str
    target: int
    epoch: int


@dataclass(frozen=True)
class HoldSelection:
    round_id: str


@dataclass(frozen=True)
class CancelSelection:
    round_id: str


@dataclass(frozen=True)
class Forward:
    round_id: str
    quota: int
    offset: int
    aggregators: tuple


@dataclass(frozen=True)
class PaceUpdate:
    stats: PopulationStats


@dataclass(frozen=True)
class DeviceCheckIn:
    """Transport envelope: a device's CheckIn frame arriving at a selector."""

    device_id: int
    message: Any


# coordinator <-> master aggregator

@dataclass(frozen=True)
class RoundSpec:
    round_id: str
    round_number: int
    task: str
    configured: int
    opened_at: int
    configured_at: int


@dataclass(frozen=True)
class AggregatorsReady:
    round_id: str
    aggregators: tuple


@dataclass(frozen=True)
class RoundFinished:
    round_id: str
    outcome: str
    weights: Any = None
    metrics: dict = field(default_factory=dict)


# master <-> aggregators

@dataclass(frozen=True)
class AggregatorAssignment:
    round_id: str
    expected: int
    secagg_k: int  # 0 when secure aggregation is off


@dataclass(frozen=True)
class AcceptDevice:
    round_id: str
    device_id: int
    runtime_version: int


@dataclass(frozen=True)
class DeviceConfigured:
    aggregator: ActorRef
    device_id: int


@dataclass(frozen=True)
class DeviceReported:
    aggregator: ActorRef
    device_id: int


@dataclass(frozen=True)
class DeviceLost:
    aggregator: ActorRef
    device_id: int
    reason: str


@dataclass(frozen=True)
class BeginReporting:
    deadline: int


@dataclass(frozen=True)
class CloseRound:
    completed: bool


@dataclass(frozen=True)
class PartialAggregate:
    aggregator: ActorRef
    state: Any  # AggregateState, GroupSum or None on failure
    contributions: int
    detail: str = ""


@dataclass(frozen=True)
class AggregatorDone:
    aggregator: ActorRef


# device-originated transport events delivered to aggregators

@dataclass(frozen=True)
class DeviceFrame:
    device_id: int
    message: Any


@dataclass(frozen=True)
class DeviceDisconnected:
    device_id: int
    round_id: str
    reason: str


# internal timers

@dataclass(frozen=True)
class Tick:
    name: str
    token: Any = None
