"""Logically timed event queue with named, reproducible random streams."""

from __future__ import annotations

import hashlib
import heapq
import itertools
from typing import Any, Callable, Optional

import numpy as np


def stable_hash(*parts: Any) -> int:
    """64-bit hash of the parts' text; independent of the interpreter's hash seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


class Timer:
    __slots__ = ("time", "cancelled")

    def __init__(self, time: int):
        self.time = time
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Engine:
    """Single-threaded discrete-event loop over integer milliseconds.

    Events at equal times run in scheduling order, so a run is fully determined by
    its seed and inputs.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self._streams: dict[str, np.random.Generator] = {}
        self.processed = 0

    def rng(self, name: str) -> np.random.Generator:
        g = self._streams.get(name)
        if g is None:
            g = self._streams[name] = np.random.default_rng([self.seed, stable_hash(name)])
        return g

    def at(self, time: int, fn: Callable, *args) -> Timer:
        time = int(time)
        if time < self.now:
            raise ValueError(f"cannot schedule at {time}, clock is at {self.now}")
        timer = Timer(time)
        heapq.heappush(self._queue, (time, next(self._seq), timer, fn, args))
        return timer

    def after(self, delay: int, fn: Callable, *args) -> Timer:
        return self.at(self.now + max(0, int(delay)), fn, *args)

    def peek(self) -> Optional[int]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        while self._queue:
            time, _, timer, fn, args = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = time
            fn(*args)
            self.processed += 1
            return True
        return False

    def run(self, until: Optional[int] = None, stop: Optional[Callable[[], bool]] = None) -> int:
        """Process events up to and including ``until``; returns the final clock."""
        q = self._queue
        while q:
            time, _, timer, fn, args = q[0]
            if until is not None and time > until:
                break
            heapq.heappop(q)
            if timer.cancelled:
                continue
            self.now = time
            fn(*args)
            self.processed += 1
            if stop is not None and stop():
                break
        if until is not None and self.now < until and (stop is None or not stop()):
            self.now = until
        return self.now
