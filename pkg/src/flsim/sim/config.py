"""Experiment configuration loaded from YAML (or a plain mapping)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from ..pace import PaceSteeringPolicy
from ..plans import FLTaskConfig, InvalidConfig, task_config_from_dict
from ..server.context import ServerConfig
from .data import InvalidSpec, SyntheticDataSpec
from .fleet import FleetSpec

ACTOR_KINDS = ("coordinator", "selector", "master", "aggregator")


class ConfigError(ValueError):
    """Raised with a mapping of field name to reason."""

    def __init__(self, reasons: Mapping[str, str]):
        self.reasons = dict(reasons)
        super().__init__("; ".join(f"{k}: {v}" for k, v in sorted(self.reasons.items())))


@dataclass(frozen=True)
class FailureInjection:
    at_ms: int
    kind: str
    index: int = -1  # position among live actors of that kind in spawn order; -1 is the newest
    action: str = "kill"


@dataclass(frozen=True)
class NetworkSpec:
    latency_ms: int = 50
    down_bytes_per_s: float = 2_000_000.0
    up_bytes_per_s: float = 500_000.0


@dataclass(frozen=True)
class DeviceRuntimeSpec:
    base_cost_ms: float = 2.0
    retry_min_ms: int = 60_000
    retry_max_ms: int = 600_000
    first_checkin_ms: int = 60_000  # initial arrivals spread over this span


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    duration_ms: int
    tasks: tuple
    fleet: FleetSpec = field(default_factory=FleetSpec)
    data: SyntheticDataSpec = field(default_factory=SyntheticDataSpec)
    pace_steering: PaceSteeringPolicy = field(default_factory=PaceSteeringPolicy)
    server: ServerConfig = field(default_factory=ServerConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    device: DeviceRuntimeSpec = field(default_factory=DeviceRuntimeSpec)
    failure_injections: tuple = ()
    output_dir: Optional[str] = None
    verify_wire: bool = False
    stop_when_done: bool = True
    raw: Mapping = field(default_factory=dict, compare=False, repr=False)

    @property
    def population(self) -> str:
        return self.tasks[0].population_name

    def config_hash(self) -> str:
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _block(cls, d: Optional[Mapping], name: str, reasons: dict):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        reasons[name] = f"unknown fields {unknown}"
        return cls() if name != "tasks" else None
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        reasons[name] = str(exc)
        return cls()


_TOP_KEYS = {
    "seed",
    "duration_s",
    "duration_ms",
    "tasks",
    "fleet",
    "data",
    "pace_steering",
    "secagg",
    "server",
    "network",
    "device",
    "failure_injections",
    "output_dir",
    "verify_wire",
    "stop_when_done",
}


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    """Validate every block and raise one ``ConfigError`` listing all problems."""
    if not isinstance(d, Mapping):
        raise ConfigError({"config": "top level must be a mapping"})
    reasons: dict[str, str] = {}
    for k in sorted(set(d) - _TOP_KEYS):
        reasons[k] = "unknown field"
    seed = d.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        reasons["seed"] = "must be a non-negative integer"
    if "duration_ms" in d:
        duration = d["duration_ms"]
    else:
        duration = d.get("duration_s", 0) * 1000 if isinstance(d.get("duration_s", 0), (int, float)) else None
    if not isinstance(duration, (int, float)) or duration <= 0:
        reasons["duration"] = "must be positive"
        duration = 1

    tasks = []
    for i, t in enumerate(d.get("tasks") or []):
        try:
            tasks.append(task_config_from_dict(t))
        except InvalidConfig as exc:
            for k, v in sorted(exc.reasons.items()):
                reasons[f"tasks[{i}].{k}"] = v
    if not tasks and not any(k.startswith("tasks[") for k in reasons):
        reasons["tasks"] = "at least one task is required"
    if len({t.population_name for t in tasks}) > 1:
        reasons["tasks"] = "all tasks must belong to one population"

    try:
        fleet = FleetSpec.from_dict(d.get("fleet"))
    except InvalidSpec as exc:
        reasons["fleet"] = str(exc)
        fleet = FleetSpec()
    try:
        data = SyntheticDataSpec.from_dict(d.get("data"))
    except InvalidSpec as exc:
        reasons["data"] = str(exc)
        data = SyntheticDataSpec()
    for t in tasks:
        if t.model_dim != data.dim:
            reasons["data"] = f"dim {data.dim} differs from task {t.task_name!r} model dim {t.model_dim}"

    pace = _block(PaceSteeringPolicy, d.get("pace_steering"), "pace_steering", reasons)
    server_d = dict(d.get("server") or {})
    sa = dict(d.get("secagg") or {})
    for key, target in (("enabled", "secagg"), ("k", "secagg_k"), ("group_target", "secagg_group_target"),
                        ("reveal_timeout_ms", "reveal_timeout_ms")):
        if key in sa:
            server_d[target] = sa.pop(key)
    if sa:
        reasons["secagg"] = f"unknown fields {sorted(sa)}"
    server = _block(ServerConfig, server_d, "server", reasons)
    network = _block(NetworkSpec, d.get("network"), "network", reasons)
    device = _block(DeviceRuntimeSpec, d.get("device"), "device", reasons)

    injections = []
    for i, f in enumerate(d.get("failure_injections") or []):
        f = dict(f)
        try:
            at = int(round(float(f.pop("at_s")) * 1000)) if "at_s" in f else int(f.pop("at_ms"))
            inj = FailureInjection(at, **f)
        except (KeyError, TypeError, ValueError) as exc:
            reasons[f"failure_injections[{i}]"] = str(exc) or "needs at_s or at_ms"
            continue
        if inj.action != "kill":
            reasons[f"failure_injections[{i}]"] = f"unsupported action {inj.action!r}"
        injections.append(inj)

    if reasons:
        raise ConfigError(reasons)
    return ExperimentConfig(
        seed=seed,
        duration_ms=int(duration),
        tasks=tuple(tasks),
        fleet=fleet,
        data=data,
        pace_steering=pace,
        server=server,
        network=network,
        device=device,
        failure_injections=tuple(sorted(injections, key=lambda f: (f.at_ms, f.kind, f.index))),
        output_dir=d.get("output_dir"),
        verify_wire=bool(d.get("verify_wire", False)),
        stop_when_done=bool(d.get("stop_when_done", True)),
        raw=json.loads(json.dumps(d, default=str)),
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError({"path": str(exc)}) from None
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError({"yaml": str(exc)}) from None
    return config_from_dict(d or {})
