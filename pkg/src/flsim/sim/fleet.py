"""Fleet generation and the simulated on-device runtime driven by the event loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..device import (
    NEVER,
    AlwaysAvailable,
    CostModel,
    DeviceProfile,
    DiurnalThreshold,
    ExampleStore,
    Job,
    TenantQueue,
    attest,
    check_eligibility,
    execute_task,
    health_record,
    tenant_schedule,
)
from ..fedavg import EvalResult, ModelParams
from ..pace import DiurnalCurve, ReconnectWindow, sample_arrival
from ..plans import FLPlan, plan_from_bytes
from ..protocol.messages import (
    Abort,
    CheckIn,
    CheckInAccepted,
    Configure,
    MaskedInput,
    Report,
    ReportAck,
    RejectWithWindow,
    RevealRequest,
    RevealShares,
    ShareBundle,
)
from ..protocol.session import SessionInput, SessionPhase, device_session_step
from ..secagg import DEFAULT_SCALE, commit, encode_fixed, reveal_shares
from .data import FederatedData, InvalidSpec, SyntheticDataSpec, generate_data


@dataclass(frozen=True)
class FleetSpec:
    n_devices: int = 1_000
    version_mix: Mapping = field(default_factory=lambda: {3: 1.0})
    genuine_fraction: float = 1.0
    dropout_hazard: float = 0.0  # per minute while training
    error_rate: float = 0.0
    upload_error_rate: float = 0.0
    speed_sigma: float = 0.5
    schedule: str = "always"  # or "diurnal"
    peak_ratio: float = 4.0
    peak_hour: float = 2.0
    f_max: float = 0.8
    store_capacity: int = 1_000
    store_expiration_ms: Optional[int] = None

    def __post_init__(self):
        if self.n_devices < 1:
            raise InvalidSpec("fleet needs at least one device")
        if not 0 <= self.genuine_fraction <= 1:
            raise InvalidSpec("genuine_fraction must be in [0, 1]")
        if self.schedule not in ("always", "diurnal"):
            raise InvalidSpec(f"unknown schedule model {self.schedule!r}")
        if self.speed_sigma < 0 or self.peak_ratio < 1:
            raise InvalidSpec("speed_sigma must be >= 0 and peak_ratio >= 1")
        total = sum(self.version_mix.values())
        if total <= 0 or any(w < 0 for w in self.version_mix.values()):
            raise InvalidSpec("version_mix weights must be non-negative with a positive sum")

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "FleetSpec":
        d = dict(d or {})
        if "version_mix" in d:
            d["version_mix"] = {int(k): float(v) for k, v in d["version_mix"].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None

    @property
    def curve(self) -> DiurnalCurve:
        if self.schedule == "always":
            return DiurnalCurve.flat()
        return DiurnalCurve.from_peak_ratio(self.peak_ratio, self.peak_hour)


@dataclass(frozen=True, eq=False)
class Fleet:
    profiles: tuple
    stores: tuple
    data: FederatedData


def generate_fleet(spec: FleetSpec, data_spec: SyntheticDataSpec, seed: int) -> Fleet:
    """Profiles, example stores and the underlying dataset; deterministic under ``seed``."""
    rng = np.random.default_rng([seed, 0xF1EE7])
    n = spec.n_devices
    versions = sorted(spec.version_mix)
    probs = np.array([spec.version_mix[v] for v in versions], dtype=np.float64)
    probs /= probs.sum()
    version = rng.choice(versions, size=n, p=probs)
    n_fake = int(round(n * (1.0 - spec.genuine_fraction)))
    fake = set(rng.choice(n, size=n_fake, replace=False).tolist()) if n_fake else set()
    speeds = rng.lognormal(0.0, spec.speed_sigma, n) if spec.speed_sigma > 0 else np.ones(n)
    propensity = rng.random(n)
    curve = spec.curve
    profiles = []
    for i in range(n):
        if spec.schedule == "always":
            schedule = AlwaysAvailable()
        else:
            schedule = DiurnalThreshold(float(propensity[i]), curve, spec.f_max)
        profiles.append(
            DeviceProfile(
                device_id=i,
                runtime_version=int(version[i]),
                genuine=i not in fake,
                speed_factor=float(speeds[i]),
                schedule=schedule,
                dropout_hazard=spec.dropout_hazard,
                error_rate=spec.error_rate,
                upload_error_rate=spec.upload_error_rate,
            )
        )
    # devices available more often (low propensity threshold) carry the bias shift
    data = generate_data(data_spec, n, seed, propensity=1.0 - propensity)
    stores = []
    for i, (X, y) in enumerate(data.shards):
        store = ExampleStore.empty(data_spec.dim, spec.store_capacity, spec.store_expiration_ms)
        stores.append(store.append(X, y, np.zeros(len(y), dtype=np.int64)))
    return Fleet(tuple(profiles), tuple(stores), data)


# -- on-device runtime --------------------------------------------------------

@dataclass
class DeviceEnv:
    """What a simulated device can reach: the clock, its links and the telemetry sinks."""

    engine: object
    network: object
    telemetry: object
    population: str
    selector_directory: dict
    n_selectors: int
    cost: CostModel = CostModel()
    retry_min_ms: int = 60_000
    retry_max_ms: int = 600_000
    secagg_scale: int = DEFAULT_SCALE
    plan_cache: dict = field(default_factory=dict)

    def plan(self, raw: bytes) -> FLPlan:
        p = self.plan_cache.get(raw)
        if p is None:
            p = self.plan_cache[raw] = plan_from_bytes(raw)
        return p


_INPUT_FOR = {"interrupted": SessionInput.INTERRUPTED, "error": SessionInput.ERROR}


class SimDevice:
    """One phone: checks in when eligible, trains when selected, reports, backs off.

    Session events are emitted through the protocol's session state machine, so the
    log can only contain legal shapes.
    """

    def __init__(self, profile: DeviceProfile, store: ExampleStore, env: DeviceEnv, rng: np.random.Generator):
        self.profile = profile
        self.store = store
        self.env = env
        self.rng = rng
        self.device_id = profile.device_id
        self.state = "idle"  # idle | checking | session
        self.attempts = 0
        self.queue = TenantQueue()
        self.job: Optional[Job] = None
        self.round_id: Optional[str] = None
        self.agg = None
        self.phase = SessionPhase.IDLE
        self.timer = None
        self.plan: Optional[FLPlan] = None
        self.result = None
        self.secagg = None  # (group, bundle) for the current round
        self.reveals: dict[str, tuple] = {}  # round id -> (aggregator, bundle)
        self.run_started = 0
        self.memory = 0
        self.sessions = 0
        env.network.register(self)

    @property
    def now(self) -> int:
        return self.env.engine.now

    # -- scheduling -----------------------------------------------------------

    def start(self, at: int) -> None:
        self.env.engine.at(max(at, self.now), self.attempt)

    def _next_eligible(self, t: int) -> Optional[int]:
        nxt = self.profile.schedule.next_available(t)
        if nxt is None or nxt == NEVER or (isinstance(nxt, float) and math.isinf(nxt)):
            return None
        return int(nxt)

    def _schedule_in(self, window: ReconnectWindow) -> None:
        self.attempts += 1
        t = sample_arrival(window, self.device_id * 1_000_003 + self.attempts, self._next_eligible)
        if t is not None:
            self.env.engine.at(max(int(t), self.now), self.attempt)

    def _retry_later(self) -> None:
        now = self.now
        self._schedule_in(ReconnectWindow(now + self.env.retry_min_ms, now + self.env.retry_max_ms))

    def attempt(self) -> None:
        if self.state != "idle":
            return
        now = self.now
        if not check_eligibility(self.profile, now):
            t = self._next_eligible(now)
            if t is not None:
                self.env.engine.at(max(t, now + 1), self.attempt)
            return
        env = self.env
        target = env.selector_directory.get(self.device_id % env.n_selectors)
        msg = CheckIn(env.population, self.device_id, self.profile.runtime_version, attest(self.profile))
        if env.network.up(self.device_id, target, msg):
            self.state = "checking"
        else:
            self._retry_later()

    # -- session events -------------------------------------------------------

    def _step(self, event: SessionInput) -> None:
        self.phase, symbol = device_session_step(self.phase, event)
        self.env.telemetry.session(self.now, self.device_id, self.round_id, symbol)

    def _cancel_timer(self) -> None:
        if self.timer is not None:
            self.timer.cancel()
            self.timer = None

    def _end(self, outcome: str, window: Optional[ReconnectWindow] = None, error: str = "") -> None:
        self._cancel_timer()
        run_ms = self.now - self.run_started if self.run_started else 0
        version = self.plan.version if self.plan is not None else 0
        self.env.telemetry.health.append(health_record(self.profile, outcome, run_ms, self.memory, error, version))
        if self.job is not None:
            if outcome == "uploaded" and self.queue.running is self.job:
                self.queue.complete(self.job)
            else:
                self.queue.discard(self.job)
            self.job = None
        self.state = "idle"
        self.round_id, self.agg, self.plan, self.result, self.secagg = None, None, None, None, None
        self.phase = SessionPhase.IDLE
        self.run_started, self.memory = 0, 0
        self.sessions += 1
        if window is not None:
            self._schedule_in(window)
        else:
            self._retry_later()

    def _fail(self, kind: str, reason: str) -> None:
        """End the session with '!' (interrupted) or '*' (error) and drop the link."""
        if self.state != "session":
            return
        self._step(_INPUT_FOR[kind])
        self.env.network.disconnect(self.device_id, self.agg, self.round_id, reason)
        self._end(kind, error=reason)

    # -- inbound frames -------------------------------------------------------

    def deliver(self, msg, sender, attachment=None) -> None:
        if isinstance(msg, RejectWithWindow):
            if self.state == "checking":
                self.state = "idle"
                self._schedule_in(ReconnectWindow(msg.window_start, msg.window_end))
        elif isinstance(msg, CheckInAccepted):
            if self.state == "checking" and self.env.network.linked(self.device_id, sender):
                self.state, self.round_id, self.agg = "session", msg.round_id, sender
                self._step(SessionInput.CHECKIN_ACCEPTED)
        elif isinstance(msg, RevealRequest):
            self._reveal(msg, sender)
        elif self.state != "session" or getattr(msg, "round_id", None) != self.round_id:
            return
        elif isinstance(msg, Configure):
            if self.phase is SessionPhase.CHECKED_IN:
                self._step(SessionInput.PLAN_DOWNLOADED)
                self._train(msg)
        elif isinstance(msg, ShareBundle):
            self.secagg = attachment
            if self.phase is SessionPhase.TRAINED:
                self._upload()
        elif isinstance(msg, ReportAck):
            if self.phase is SessionPhase.UPLOADING:
                self._step(SessionInput.UPLOAD_ACCEPTED if msg.accepted else SessionInput.UPLOAD_REJECTED)
                self._end("uploaded" if msg.accepted else "rejected", ReconnectWindow(msg.window_start, msg.window_end))
        elif isinstance(msg, Abort):
            self._fail("error", f"aborted: {msg.reason}")

    def connection_lost(self, ref) -> None:
        if self.state == "checking":
            self.state = "idle"
            self._retry_later()
        elif self.state == "session" and ref == self.agg:
            self._fail("error", "connection lost")
        else:
            for rid, (agg, _) in list(self.reveals.items()):
                if agg == ref:
                    del self.reveals[rid]

    # -- training and upload --------------------------------------------------

    def _train(self, msg: Configure) -> None:
        env = self.env
        self.plan = env.plan(msg.plan)
        self.job = Job(env.population, self.now, self.round_id)
        self.queue.enqueue(self.job)
        if tenant_schedule(self.queue, self.now, check_eligibility(self.profile, self.now)) is not self.job:
            self._fail("interrupted", "not eligible at start")
            return
        seed = (self.plan.device_part.seed * 1_000_003 + self.device_id) % (1 << 32)
        run = execute_task(
            self.profile, self.plan, ModelParams(msg.checkpoint), self.store, self.now, self.rng, env.cost, seed
        )
        if run.outcome == "no_examples":
            # no symbol exists for this case; it shows as an error and counts as a dropout
            self._fail("error", "no matching examples")
            return
        self._step(SessionInput.TRAINING_STARTED)
        self.run_started, self.memory = self.now, run.memory_proxy_bytes
        if run.outcome == "ok":
            self.result = run.result
            self.timer = env.engine.after(run.duration_ms, self._trained)
        else:
            self.timer = env.engine.after(run.fail_at_ms, self._fail, run.outcome, run.outcome)

    def _trained(self) -> None:
        self.timer = None
        if self.state != "session":
            return
        self._step(SessionInput.TRAINING_DONE)
        if self.plan.server_part.secagg_enabled and self.plan.is_training and self.secagg is None:
            return  # wait for the key-share bundle
        self._upload()

    def _upload(self) -> None:
        env = self.env
        self._step(SessionInput.UPLOAD_STARTED)
        if self.profile.upload_error_rate > 0 and self.rng.random() < self.profile.upload_error_rate:
            self.timer = env.engine.after(env.network.latency, self._fail, "error", "upload failed")
            return
        r = self.result
        if isinstance(r, EvalResult):
            msg = Report(env.population, self.round_id, self.device_id, np.zeros(0), r.count, (("loss", r.loss),))
        elif self.secagg is not None:
            group, bundle = self.secagg
            fixed = encode_fixed(r, env.secagg_scale, group.size)
            msg = MaskedInput(env.population, self.round_id, self.device_id, commit(group, bundle, fixed).entries)
            self.reveals[self.round_id] = (self.agg, bundle)
        else:
            msg = Report(env.population, self.round_id, self.device_id, r.delta, r.weight, ())
        if not env.network.up(self.device_id, self.agg, msg, self.round_id):
            self._fail("error", "aggregator unreachable")

    def _reveal(self, msg: RevealRequest, sender) -> None:
        entry = self.reveals.pop(msg.round_id, None)
        if entry is None or entry[0] != sender or not check_eligibility(self.profile, self.now):
            return
        shares = reveal_shares(entry[1], msg.dropped)
        out = RevealShares(self.env.population, msg.round_id, self.device_id, tuple((o, x, y) for o, (x, y) in sorted(shares.items())))
        self.env.network.up(self.device_id, sender, out, msg.round_id)
