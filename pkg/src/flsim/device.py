"""On-device runtime: example store, eligibility, attestation, task execution, job queue."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .analytics import HealthRecord
from .fedavg import ModelParams
from .pace import MS_PER_DAY, MS_PER_HOUR, DiurnalCurve
from .plans import DataSelector, FLPlan, execute_plan

MS_PER_MINUTE = 60_000
NEVER = math.inf


class DeviceError(Exception):
    pass


class NoMatchingExamples(DeviceError):
    pass


class InterruptedByEligibility(DeviceError):
    pass


class ComputeError(DeviceError):
    pass


# -- example store ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExampleStore:
    """Locally collected examples with a size cap and an age limit.

    Arrays are kept in insertion order; ``timestamps`` need not be sorted.
    """

    features: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    metadata: tuple = ()
    capacity: int = 1000
    expiration_ms: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(X), -1) if len(X) else X.reshape(0, 0)
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        ts = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        if not (X.shape[0] == len(y) == len(ts)):
            raise ValueError("features, labels and timestamps disagree on length")
        meta = tuple(self.metadata) if self.metadata else tuple({} for _ in range(len(y)))
        if len(meta) != len(y):
            raise ValueError("metadata length differs from example count")
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")
        for name, v in (("features", X), ("labels", y), ("timestamps", ts)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "metadata", meta)

    @classmethod
    def empty(cls, dim: int, capacity: int = 1000, expiration_ms: Optional[int] = None) -> "ExampleStore":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=np.int64), (), capacity, expiration_ms)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def append(self, X, y, timestamps, metadata: Optional[Sequence[Mapping]] = None) -> "ExampleStore":
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        ts = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        meta = tuple(metadata) if metadata is not None else tuple({} for _ in range(len(y)))
        return ExampleStore(
            np.vstack([self.features, X]),
            np.concatenate([self.labels, y]),
            np.concatenate([self.timestamps, ts]),
            self.metadata + meta,
            self.capacity,
            self.expiration_ms,
        )

    def _subset(self, idx: np.ndarray) -> "ExampleStore":
        return ExampleStore(
            self.features[idx],
            self.labels[idx],
            self.timestamps[idx],
            tuple(self.metadata[i] for i in idx),
            self.capacity,
            self.expiration_ms,
        )

    def select(self, selector: DataSelector, now: int) -> tuple[np.ndarray, np.ndarray]:
        if selector.equals:
            keep = [
                i
                for i in range(len(self))
                if selector.matches(self.metadata[i], int(now - self.timestamps[i]))
            ]
            idx = np.asarray(keep, dtype=np.int64)
        elif selector.max_age_ms is not None:
            idx = np.flatnonzero(now - self.timestamps <= selector.max_age_ms)
        else:
            idx = np.arange(len(self))
        if selector.limit is not None:
            idx = idx[: selector.limit]
        return self.features[idx], self.labels[idx]


def maintain_store(store: ExampleStore, now: int) -> ExampleStore:
    """Drop expired examples, then the oldest ones until the store fits its capacity."""
    keep = np.arange(len(store))
    if store.expiration_ms is not None:
        keep = keep[now - store.timestamps[keep] <= store.expiration_ms]
    if len(keep) > store.capacity:
        order = np.argsort(store.timestamps[keep], kind="stable")
        keep = np.sort(keep[order[len(keep) - store.capacity :]])
    if len(keep) == len(store):
        return store
    return store._subset(keep)


# -- availability -------------------------------------------------------------

class AvailabilitySchedule:
    """When a device is idle, charging and on an unmetered network."""

    def is_available(self, t: int) -> bool:
        raise NotImplementedError

    def next_available(self, t: int) -> Optional[int]:
        """First instant >= t at which the device is available, or None."""
        raise NotImplementedError

    def available_until(self, t: int) -> float:
        """First instant > t at which an available device stops being available."""
        raise NotImplementedError


class AlwaysAvailable(AvailabilitySchedule):
    def is_available(self, t):
        return True

    def next_available(self, t):
        return int(t)

    def available_until(self, t):
        return NEVER


@dataclass(frozen=True)
class IntervalSchedule(AvailabilitySchedule):
    """Half-open ``[start, end)`` intervals; with ``daily`` they repeat every 24 h."""

    intervals: tuple
    daily: bool = False

    def __post_init__(self):
        ivs = tuple(sorted((int(a), int(b)) for a, b in self.intervals))
        for a, b in ivs:
            if a >= b:
                raise ValueError("interval start must precede its end")
            if self.daily and not (0 <= a and b <= MS_PER_DAY):
                raise ValueError("daily intervals must lie within one day")
        for (a1, b1), (a2, b2) in zip(ivs, ivs[1:]):
            if a2 < b1:
                raise ValueError("intervals overlap")
        object.__setattr__(self, "intervals", ivs)

    def _iter_from(self, t: int):
        if not self.daily:
            yield from self.intervals
            return
        day = t // MS_PER_DAY
        for d in (day - 1, day, day + 1, day + 2):
            for a, b in self.intervals:
                yield a + d * MS_PER_DAY, b + d * MS_PER_DAY

    def is_available(self, t):
        return any(a <= t < b for a, b in self._iter_from(t))

    def next_available(self, t):
        for a, b in self._iter_from(t):
            if b > t:
                return int(max(a, t))
        return None

    def available_until(self, t):
        end = None
        for a, b in self._iter_from(t):
            if end is None:
                if a <= t < b:
                    end = b
            elif a == end:
                end = b
        return NEVER if end is None else end


@dataclass(frozen=True)
class DiurnalThreshold(AvailabilitySchedule):
    """Available while ``u < f_max * m(t) / max(m)``: a fixed per-device propensity ``u``.

    Across a fleet with ``u`` uniform on [0, 1), the eligible fraction at time t is
    ``f_max * m(t) / max(m)``, so the fleet-level peak/trough ratio equals the curve's.
    """

    u: float
    curve: DiurnalCurve
    f_max: float = 0.8

    @property
    def _level(self) -> float:
        return self.u * max(self.curve.hourly) / self.f_max

    def is_available(self, t):
        return self.curve.multiplier(t) > self._level

    def _crossings(self, t: int, rising: bool):
        """Times > t where the curve crosses the level upward (or downward)."""
        L = self._level
        h = self.curve.hourly
        seg = int(t // MS_PER_HOUR)
        for s in range(seg, seg + 49):
            a, b = h[s % 24], h[(s + 1) % 24]
            if (rising and a <= L < b) or (not rising and a > L >= b):
                x = s * MS_PER_HOUR + (L - a) / (b - a) * MS_PER_HOUR
                if x >= t:
                    yield x

    def next_available(self, t):
        t = int(t)
        if self.is_available(t):
            return t
        L = self._level
        if L >= max(self.curve.hourly):
            return None
        for x in self._crossings(t, rising=True):
            c = max(t + 1, int(math.floor(x)))
            while not self.is_available(c):
                c += 1
            while c - 1 > t and self.is_available(c - 1):
                c -= 1
            return c
        return None

    def available_until(self, t):
        if min(self.curve.hourly) > self._level:
            return NEVER
        for x in self._crossings(int(t), rising=False):
            c = max(int(t) + 1, int(math.floor(x)))
            while self.is_available(c):
                c += 1
            while c - 1 > t and not self.is_available(c - 1):
                c -= 1
            return c
        return NEVER


# -- device profile -----------------------------------------------------------

@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    runtime_version: int = 3
    genuine: bool = True
    speed_factor: float = 1.0
    schedule: AvailabilitySchedule = field(default_factory=AlwaysAvailable)
    dropout_hazard: float = 0.0  # probability per minute of losing eligibility while training
    error_rate: float = 0.0  # probability a training run fails
    upload_error_rate: float = 0.0
    os_version: str = "os-12"

    def __post_init__(self):
        if not (self.speed_factor > 0 and math.isfinite(self.speed_factor)):
            raise ValueError("speed_factor must be finite and positive")
        for name in ("dropout_hazard", "error_rate", "upload_error_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1]")


def check_eligibility(profile: DeviceProfile, now: int) -> bool:
    return profile.schedule.is_available(now)


def attest(profile: DeviceProfile) -> bool:
    return bool(profile.genuine)


def hazard_rate_per_ms(per_minute: float) -> float:
    if per_minute >= 1:
        return math.inf
    return -math.log1p(-per_minute) / MS_PER_MINUTE


def interruption_probability(per_minute: float, duration_ms: float) -> float:
    return -math.expm1(-hazard_rate_per_ms(per_minute) * duration_ms)


def calibrate_hazard(target: float, durations_ms: Sequence[float]) -> float:
    """Per-minute hazard whose mean interruption probability over ``durations_ms`` is ``target``."""
    if not 0 <= target < 1:
        raise ValueError("target must be in [0, 1)")
    d = np.asarray(durations_ms, dtype=np.float64)
    if target == 0:
        return 0.0

    def gap(h):
        lam = -math.log1p(-h) / MS_PER_MINUTE
        return float(np.mean(-np.expm1(-lam * d))) - target

    return brentq(gap, 1e-12, 1 - 1e-12, xtol=1e-14)


# -- task execution -----------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    base_cost_ms: float = 2.0  # per example-epoch on a speed-1 device
    min_duration_ms: int = 1

    def duration(self, examples: int, epochs: int, speed_factor: float) -> int:
        return max(self.min_duration_ms, int(round(self.base_cost_ms * examples * epochs / speed_factor)))


@dataclass(frozen=True)
class TaskExecution:
    """How one task run unfolds on the simulated clock, relative to training start.

    ``outcome`` is ``ok``, ``interrupted``, ``error`` or ``no_examples``; ``fail_at_ms``
    is the offset of the interruption or error (None when the run succeeds).
    """

    outcome: str
    duration_ms: int
    examples: int
    fail_at_ms: Optional[int] = None
    result: Any = None
    memory_proxy_bytes: int = 0

    @property
    def symbol(self) -> str:
        return {"ok": "]", "interrupted": "!", "error": "*", "no_examples": "*"}[self.outcome]


def execute_task(
    profile: DeviceProfile,
    plan: FLPlan,
    checkpoint: ModelParams,
    store: ExampleStore,
    now: int,
    rng: np.random.Generator,
    cost: CostModel = CostModel(),
    seed: Optional[int] = None,
) -> TaskExecution:
    """Select data, time the run, draw failures, and compute the update when it survives.

    The eligibility window ends at the schedule's next unavailability; the dropout
    hazard adds an exponential interruption clock. The earliest failure wins.
    """
    X, y = store.select(plan.device_part.data_selection, now)
    n = len(y)
    if n == 0:
        return TaskExecution("no_examples", 0, 0, 0)
    epochs = plan.device_part.epochs if plan.device_part.mutates_weights else 1
    duration = cost.duration(n, epochs, profile.speed_factor)
    memory = 8 * (n * (checkpoint.dim + 1) + 3 * checkpoint.dim)
    failures = []
    lam = hazard_rate_per_ms(profile.dropout_hazard)
    if lam > 0:
        t_int = 0.0 if math.isinf(lam) else rng.exponential(1.0 / lam)
        failures.append((int(t_int), "interrupted"))
    leave = profile.schedule.available_until(now)
    if leave != NEVER:
        failures.append((int(leave - now), "interrupted"))
    if profile.error_rate > 0 and rng.random() < profile.error_rate:
        failures.append((int(rng.integers(0, duration + 1)), "error"))
    early = [f for f in failures if f[0] < duration]
    if early:
        at, kind = min(early)
        return TaskExecution(kind, duration, n, at, None, memory)
    result = execute_plan(plan, checkpoint, (X, y), seed=seed)
    return TaskExecution("ok", duration, n, None, result, memory)


def health_record(profile: DeviceProfile, state: str, run_ms: int, memory: int, error: str, plan_version: int) -> HealthRecord:
    return HealthRecord(
        device_state=state,
        run_duration_ms=int(run_ms),
        memory_proxy_bytes=int(memory),
        error_code=error,
        model_version=int(plan_version),
        os_version=profile.os_version,
        runtime_version=int(profile.runtime_version),
    )


# -- multi-tenancy ------------------------------------------------------------

@dataclass
class Job:
    population: str
    enqueued_at: int
    payload: Any = None


class TenantQueue:
    """FIFO of pending FL jobs across populations; one job runs at a time."""

    def __init__(self):
        self._pending: deque[Job] = deque()
        self.running: Optional[Job] = None
        self.history: list[tuple[str, str]] = []

    def __len__(self) -> int:
        return len(self._pending)

    def enqueue(self, job: Job) -> None:
        self._pending.append(job)

    def _finish(self, job: Job, how: str) -> None:
        if self.running is not job:
            raise DeviceError("only the running job can finish")
        self.running = None
        self.history.append((job.population, how))

    def complete(self, job: Job) -> None:
        self._finish(job, "completed")

    def abort(self, job: Job) -> None:
        self._finish(job, "aborted")

    def discard(self, job: Job) -> None:
        """Drop a job whether it is running or still pending."""
        if self.running is job:
            self.abort(job)
        elif job in self._pending:
            self._pending.remove(job)


def tenant_schedule(queue: TenantQueue, now: int, eligible: bool = True) -> Optional[Job]:
    """Start the oldest pending job when nothing runs and the device is eligible."""
    if queue.running is not None or not eligible or not queue._pending:
        return None
    job = queue._pending.popleft()
    queue.running = job
    return job

