"""Configuration and external services shared by the actors of one population."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from ..analytics import Telemetry
from ..pace import DEFAULT_POLICY, DiurnalCurve, PaceSteeringPolicy, PopulationStats
from ..plans import TaskRegistry
from .ledger import RoundLedger
from .lock import LockService


@dataclass(frozen=True)
class ServerConfig:
    n_selectors: int = 4
    lease_ms: int = 10_000
    detection_delay_ms: int = 1_000
    config_timeout_ms: int = 10_000
    aggregator_capacity: int = 100
    pipelining: bool = True
    secagg: bool = False
    secagg_group_target: int = 100
    secagg_k: int = 2
    reveal_timeout_ms: int = 5_000
    estimated_population: int = 1_000
    required_checkin_rate: Optional[float] = None  # devices per second; derived when None
    round_estimate_ms: int = 120_000

    @property
    def renew_every(self) -> int:
        return max(1, self.lease_ms // 3)

    @property
    def watch_every(self) -> int:
        return max(1, self.lease_ms // 2)

    @property
    def detection_timeout(self) -> int:
        """Worst-case time from a coordinator crash to its replacement."""
        return self.lease_ms + self.watch_every


@dataclass
class ServerContext:
    """Handles to the infrastructure the actors talk to.

    The lock service and ledger stand in for external storage, the network for the
    device links; none of them hold actor state.
    """

    population: str
    config: ServerConfig
    lock: LockService
    ledger: RoundLedger
    registry: TaskRegistry
    telemetry: Telemetry
    network: Any
    pace_policy: PaceSteeringPolicy = DEFAULT_POLICY
    curve: DiurnalCurve = field(default_factory=DiurnalCurve.flat)
    selector_directory: dict = field(default_factory=dict)  # index -> current ActorRef (load balancer)
    done: bool = False

    def pace_stats(self, target_time: int, goal: int, selection_timeout_ms: int) -> PopulationStats:
        rate = self.config.required_checkin_rate
        if rate is None:
            rate = 2.0 * goal / (selection_timeout_ms / 1000.0)
        return PopulationStats(
            estimated_active_devices=self.config.estimated_population,
            required_checkin_rate=rate,
            next_round_target_time=int(target_time),
            diurnal_curve=self.curve,
        )
