"""Pace steering: server-suggested reconnect windows.

The policy is a pure function of population statistics, the current time and a
per-device seed. Small populations get windows clustered around the next expected
round so check-ins arrive together; large populations get start offsets spread
uniformly over a period sized to deliver the required check-in rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MS_PER_HOUR = 3_600_000
MS_PER_DAY = 24 * MS_PER_HOUR

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stateless_uniform(*keys: int) -> float:
    """Deterministic uniform in [0, 1) derived only from the integer keys."""
    h = 0x1234_5678_9ABC_DEF0
    for k in keys:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return (h >> 11) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class DiurnalCurve:
    """Availability multiplier over the local day, sampled at 24 hourly points.

    Values between hourly points are linearly interpolated, so the extremes of the
    curve are exactly the extremes of the hourly table.
    """

    hourly: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.hourly)
        if len(vals) != 24:
            raise ValueError("a diurnal curve needs exactly 24 hourly multipliers")
        if min(vals) <= 0 or not all(math.isfinite(v) for v in vals):
            raise ValueError("diurnal multipliers must be positive and finite")
        object.__setattr__(self, "hourly", vals)

    @classmethod
    def flat(cls) -> "DiurnalCurve":
        return cls((1.0,) * 24)

    @classmethod
    def sinusoid(cls, amplitude: float = 0.6, baseline: float = 1.0, peak_hour: float = 2.0) -> "DiurnalCurve":
        if not 0 <= amplitude < baseline:
            raise ValueError("amplitude must be in [0, baseline)")
        return cls(tuple(baseline + amplitude * math.cos(2 * math.pi * (h - peak_hour) / 24) for h in range(24)))

    @classmethod
    def from_peak_ratio(cls, ratio: float = 4.0, peak_hour: float = 2.0) -> "DiurnalCurve":
        """Sinusoid around 1 whose max/min equals ``ratio``."""
        if ratio < 1:
            raise ValueError("peak ratio must be >= 1")
        return cls.sinusoid((ratio - 1) / (ratio + 1), 1.0, peak_hour)

    def multiplier(self, t_ms: float) -> float:
        pos = (t_ms % MS_PER_DAY) / MS_PER_HOUR
        lo = int(pos) % 24
        frac = pos - int(pos)
        return self.hourly[lo] * (1 - frac) + self.hourly[(lo + 1) % 24] * frac

    @property
    def peak_ratio(self) -> float:
        return max(self.hourly) / min(self.hourly)

    @property
    def mean(self) -> float:
        # exact mean of the piecewise-linear periodic curve
        return sum(self.hourly) / 24

    @property
    def peak_hour(self) -> int:
        return int(np.argmax(self.hourly))

    @property
    def trough_hour(self) -> int:
        return int(np.argmin(self.hourly))


def diurnal_multiplier(curve: DiurnalCurve, t_ms: float) -> float:
    return curve.multiplier(t_ms)


@dataclass(frozen=True)
class PopulationStats:
    """Server-side estimates the steering policy works from.

    ``estimated_active_devices`` is the day-averaged count of devices that check in;
    the current count is that figure scaled by the diurnal curve.
    """

    estimated_active_devices: float
    required_checkin_rate: float  # devices per second
    next_round_target_time: int  # ms
    diurnal_curve: DiurnalCurve = field(default_factory=DiurnalCurve.flat)

    def __post_init__(self):
        if self.estimated_active_devices < 0 or self.required_checkin_rate < 0:
            raise ValueError("population statistics must be non-negative")


@dataclass(frozen=True)
class ReconnectWindow:
    start: int
    end: int

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("reconnect window must satisfy start < end")

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end

    @property
    def width(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PaceSteeringPolicy:
    enabled: bool = True
    concentration_threshold: int = 1000
    concentration_width_ms: int = 20_000
    min_period_ms: int = 5 * 60_000
    max_period_ms: int = MS_PER_DAY
    window_fraction: float = 0.05
    min_window_ms: int = 1_000
    immediate_retry_ms: int = 1_000

    def spreading_period(self, stats: PopulationStats, now: int) -> int:
        curve = stats.diurnal_curve
        active_now = stats.estimated_active_devices * curve.multiplier(now) / curve.mean
        if stats.required_checkin_rate <= 0:
            period = self.max_period_ms
        else:
            period = 1000.0 * active_now / stats.required_checkin_rate
        return int(min(max(period, self.min_period_ms), self.max_period_ms))

    def suggest_window(self, stats: PopulationStats, now: int, seed: int) -> ReconnectWindow:
        if not self.enabled:
            return ReconnectWindow(now, now + self.immediate_retry_ms)
        if stats.estimated_active_devices < self.concentration_threshold:
            curve = stats.diurnal_curve
            target = max(stats.next_round_target_time, now)
            width = max(self.min_window_ms, int(self.concentration_width_ms * curve.mean / curve.multiplier(target)))
            start = max(now, target - width // 2)
            return ReconnectWindow(start, max(start + width, target + 1))
        period = self.spreading_period(stats, now)
        width = max(self.min_window_ms, int(period * self.window_fraction))
        start = now + int(stateless_uniform(seed, now) * (period - width))
        return ReconnectWindow(start, start + width)


DEFAULT_POLICY = PaceSteeringPolicy()


def suggest_window(
    stats: PopulationStats, now: int, seed: int, policy: PaceSteeringPolicy = DEFAULT_POLICY
) -> ReconnectWindow:
    return policy.suggest_window(stats, now, seed)


def sample_arrival(
    window: ReconnectWindow,
    seed: int,
    next_eligible: Optional[Callable[[int], Optional[int]]] = None,
) -> Optional[int]:
    """Pick the device's reconnect time inside ``window``, deferring while ineligible.

    ``next_eligible(t)`` returns the first eligible instant at or after ``t`` (or
    ``None`` if the device never becomes eligible again).
    """
    t = window.start + int(stateless_uniform(seed, window.start, 0xA11) * window.width)
    if next_eligible is not None:
        return next_eligible(t)
    return t


def bucket_counts(times: Sequence[float], bucket_ms: int = 10_000, origin: int = 0) -> np.ndarray:
    arr = np.asarray(times, dtype=np.float64)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    idx = ((arr - origin) // bucket_ms).astype(np.int64)
    idx -= idx.min()
    return np.bincount(idx)
