"""Wire the whole stack together, run it on the event loop, and write artifacts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import __version__
from ..analytics import (
    HEALTH_FIELDS,
    RoundRecord,
    Telemetry,
    alert_check,
    round_metrics,
    shape_distribution,
    windowed_series,
)
from ..device import CostModel
from ..fedavg import ModelParams, evaluate
from ..pace import (
    PaceSteeringPolicy,
    PopulationStats,
    bucket_counts,
    sample_arrival,
)
from ..plans import GateRejected, deploy_all
from ..server.actors import ActorRef, ActorSystem, UnknownActor
from ..server.context import ServerContext
from ..server.ledger import RoundLedger
from ..server.lock import LockService
from ..server.selector import Selector
from .config import ACTOR_KINDS, ExperimentConfig, FailureInjection
from ..engine import Engine
from .fleet import DeviceEnv, Fleet, SimDevice, generate_fleet
from .network import Network

AVAILABILITY_STEP_MS = 600_000


@dataclass
class Simulation:
    cfg: ExperimentConfig
    engine: Engine
    system: ActorSystem
    ctx: ServerContext
    network: Network
    fleet: Fleet
    devices: list
    gate_reports: dict
    injections: list = field(default_factory=list)  # (time, kind, index, victim or "")
    coordinator_deaths: int = 0

    @property
    def telemetry(self) -> Telemetry:
        return self.ctx.telemetry

    @property
    def ledger(self) -> RoundLedger:
        return self.ctx.ledger


def _gate(cfg: ExperimentConfig):
    registry, reports = deploy_all(cfg.tasks)
    rejected = [f"{name}: {'; '.join(r.details)}" for (_, name), r in sorted(reports.items()) if not r.accepted]
    if rejected:
        raise GateRejected(" | ".join(rejected))
    return registry, reports


def build_simulation(cfg: ExperimentConfig) -> Simulation:
    """Everything up to time zero: gate, fleet, server actors and the first check-ins."""
    registry, reports = _gate(cfg)
    engine = Engine(cfg.seed)
    system = ActorSystem(engine, detection_delay=cfg.server.detection_delay_ms)
    telemetry = Telemetry()
    net = cfg.network
    network = Network(system, telemetry, net.latency_ms, net.down_bytes_per_s, net.up_bytes_per_s, cfg.verify_wire)
    fleet = generate_fleet(cfg.fleet, cfg.data, cfg.seed)
    ctx = ServerContext(
        population=cfg.population,
        config=cfg.server,
        lock=LockService(cfg.server.lease_ms),
        ledger=RoundLedger(),
        registry=registry,
        telemetry=telemetry,
        network=network,
        pace_policy=cfg.pace_steering,
        curve=cfg.fleet.curve,
    )
    sim = Simulation(cfg, engine, system, ctx, network, fleet, [], reports)

    selector_index: dict[ActorRef, int] = {}

    def spawn_selector(i: int) -> None:
        ref = system.spawn(Selector, f"{ctx.population}/selector-{i}", ctx, i)
        selector_index[ref] = i

    def restart_selector(ref: ActorRef) -> None:
        spawn_selector(selector_index.pop(ref))

    def on_death(ref: ActorRef, reason: str) -> None:
        if ref.kind == "coordinator":
            sim.coordinator_deaths += 1

    system.supervise("selector", restart_selector)
    system.on_death(on_death)
    for i in range(cfg.server.n_selectors):
        spawn_selector(i)

    d = cfg.device
    env = DeviceEnv(
        engine=engine,
        network=network,
        telemetry=telemetry,
        population=ctx.population,
        selector_directory=ctx.selector_directory,
        n_selectors=cfg.server.n_selectors,
        cost=CostModel(d.base_cost_ms),
        retry_min_ms=d.retry_min_ms,
        retry_max_ms=d.retry_max_ms,
    )
    arrivals = engine.rng("first-checkin").integers(0, max(1, d.first_checkin_ms), len(fleet.profiles))
    for profile, store, t0 in zip(fleet.profiles, fleet.stores, arrivals):
        dev = SimDevice(profile, store, env, engine.rng(f"device/{profile.device_id}"))
        dev.start(int(t0))
        sim.devices.append(dev)

    for inj in cfg.failure_injections:
        engine.at(inj.at_ms, inject_failure, sim, inj)
    return sim


def inject_failure(sim: Simulation, inj: FailureInjection) -> Optional[ActorRef]:
    """Kill a live actor of a kind at the current instant; ``index`` counts in spawn order.

    Returns the victim, or None when no such actor is alive at that moment.
    """
    if inj.kind not in ACTOR_KINDS:
        raise UnknownActor(f"unknown actor kind {inj.kind!r}")
    if inj.action != "kill":
        raise ValueError(f"unsupported action {inj.action!r}")
    live = sim.system.live(inj.kind)
    victim = live[inj.index] if -len(live) <= inj.index < len(live) else None
    if victim is not None:
        sim.system.kill(victim, "injected failure")
    sim.injections.append((sim.engine.now, inj.kind, inj.index, str(victim) if victim else ""))
    return victim


def run_simulation(sim: Simulation) -> int:
    cfg = sim.cfg
    stop = (lambda: sim.ctx.done) if cfg.stop_when_done else None
    return sim.engine.run(until=cfg.duration_ms, stop=stop)


# -- artifacts ----------------------------------------------------------------

def availability_series(fleet: Fleet, end_ms: int, step_ms: int = AVAILABILITY_STEP_MS) -> list[tuple[int, int]]:
    """Number of eligible devices sampled on a fixed grid."""
    out = []
    for t in range(0, max(end_ms, 1), step_ms):
        out.append((t, sum(1 for p in fleet.profiles if p.schedule.is_available(t))))
    return out


def participating_series(records: Sequence[RoundRecord], end_ms: int, step_ms: int = AVAILABILITY_STEP_MS) -> list:
    """Devices configured into rounds, by round closing time, per grid step."""
    n = max(1, -(-end_ms // step_ms))
    counts = [0] * n
    for r in records:
        if r.closed_at >= 0 and r.closed_at < n * step_ms:
            counts[r.closed_at // step_ms] += r.accepted
    return [(i * step_ms, c) for i, c in enumerate(counts)]


def final_losses(sim: Simulation) -> dict:
    X, y = sim.fleet.data.holdout
    out = {}
    for task in sim.ctx.registry.tasks(sim.ctx.population):
        if task.config.kind != "training":
            continue
        rec = sim.ledger.latest(task.name)
        w = np.array(rec.weights) if rec else np.zeros(task.config.model_dim)
        out[task.name] = evaluate(ModelParams(w), (X, y), task.config.model_kind).loss
    return out


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def write_artifacts(sim: Simulation, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    tel = sim.telemetry
    end = sim.engine.now
    (out / "events.log").write_text(tel.event_log())
    (out / "ledger.jsonl").write_text(sim.ledger.dumps())
    records = round_metrics(tel.server)
    cols = RoundRecord.columns()
    _write_csv(out / "rounds.csv", cols, ([getattr(r, c) for c in cols] for r in records))
    _write_csv(
        out / "server_events.csv",
        ["time", "round_id", "kind", "device_id", "value"],
        ((e.time, e.round_id, e.kind, e.device_id, repr(float(e.value))) for e in tel.server),
    )
    dist = shape_distribution(tel.sessions)
    _write_csv(out / "shapes.csv", ["shape", "count", "percent"], ((s, c.count, c.percent) for s, c in dist.items()))
    _write_csv(
        out / "traffic.csv",
        ["direction", "message", "count", "bytes"],
        ((d, m, c[0], c[1]) for (d, m), c in sorted(tel.traffic.items())),
    )
    series = windowed_series(records)
    _write_csv(
        out / "windows.csv",
        ["start", "rounds", "completed_rounds", "completion_rate", "configured", "dropped", "dropout_rate"],
        ((w.start, w.rounds, w.completed_rounds, w.completion_rate, w.configured, w.dropped, w.dropout_rate) for w in series),
    )
    _write_csv(
        out / "alerts.csv",
        ["window_start", "metric", "value", "threshold", "direction"],
        ((a.window_start, a.metric, a.value, a.threshold, a.direction) for a in alert_check(series)),
    )
    counts = bucket_counts(tel.checkins)
    _write_csv(out / "arrivals_per_bucket.csv", ["bucket_start", "checkins"], ((i * 10_000, int(c)) for i, c in enumerate(counts)))
    avail = availability_series(sim.fleet, end)
    part = dict(participating_series(records, end))
    _write_csv(out / "availability.csv", ["time", "eligible", "participating"], ((t, a, part.get(t, 0)) for t, a in avail))
    _write_csv(out / "health.csv", HEALTH_FIELDS, ([getattr(h, f) for f in HEALTH_FIELDS] for h in tel.health))
    _write_csv(out / "injections.csv", ["time", "kind", "index", "victim"], sim.injections)
    losses = final_losses(sim)
    manifest = {
        "flsim_version": __version__,
        "seed": sim.cfg.seed,
        "config_hash": sim.cfg.config_hash(),
        "population": sim.ctx.population,
        "duration_ms": sim.cfg.duration_ms,
        "end_time_ms": end,
        "finished": sim.ctx.done,
        "events_processed": sim.engine.processed,
        "rounds_committed": {t.name: (sim.ledger.latest(t.name).round_number if sim.ledger.latest(t.name) else 0)
                             for t in sim.ctx.registry.tasks(sim.ctx.population)},
        "final_eval_loss": losses,
        "coordinator_deaths": sim.coordinator_deaths,
        "config": sim.cfg.raw,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


@dataclass
class ExperimentResult:
    sim: Simulation
    out_dir: Optional[Path]
    manifest: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Gate the tasks, run the configured duration, and write artifacts when a directory is given."""
    sim = build_simulation(cfg)
    run_simulation(sim)
    target = out_dir if out_dir is not None else cfg.output_dir
    if target is None:
        return ExperimentResult(sim, None, {})
    path = Path(target)
    return ExperimentResult(sim, path, write_artifacts(sim, path))


# -- synchronized rejection scenario ------------------------------------------

def simulate_mass_rejection(
    n_devices: int,
    policy: PaceSteeringPolicy,
    stats: PopulationStats,
    now: int = 0,
    seed: int = 0,
) -> np.ndarray:
    """Reconnect times after ``n_devices`` are rejected at the same instant."""
    times = np.empty(n_devices, dtype=np.int64)
    for i in range(n_devices):
        w = policy.suggest_window(stats, now, seed * 1_000_003 + i)
        times[i] = sample_arrival(w, seed * 1_000_003 + i)
    return times
