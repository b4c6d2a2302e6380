"""Lease-based registry mapping each population to its single coordinator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Generic, Optional, TypeVar

T = TypeVar("T")


class LockUnavailable(Exception):
    pass


@dataclass(frozen=True)
class Lease(Generic[T]):
    population: str
    owner: T
    epoch: int
    expires_at: int


class LockService(Generic[T]):
    """At most one unexpired lease per population; epochs strictly increase.

    Time is passed in explicitly so the service never reads a clock of its own.
    """

    def __init__(self, lease_ms: int = 10_000):
        if lease_ms <= 0:
            raise ValueError("lease must be positive")
        self.lease_ms = lease_ms
        self._leases: dict[str, Lease[T]] = {}
        self._epochs: dict[str, int] = {}
        self.grants: list[tuple[int, str, int]] = []

    def holder(self, population: str, now: int) -> Optional[Lease[T]]:
        lease = self._leases.get(population)
        if lease is None or lease.expires_at <= now:
            return None
        return lease

    def epoch(self, population: str) -> int:
        return self._epochs.get(population, 0)

    def try_acquire(self, population: str, owner: T, now: int) -> Optional[Lease[T]]:
        if self.holder(population, now) is not None:
            return None
        epoch = self._epochs.get(population, 0) + 1
        self._epochs[population] = epoch
        lease = Lease(population, owner, epoch, now + self.lease_ms)
        self._leases[population] = lease
        self.grants.append((now, population, epoch))
        return lease

    def acquire(self, population: str, owner: T, now: int) -> Lease[T]:
        lease = self.try_acquire(population, owner, now)
        if lease is None:
            raise LockUnavailable(f"{population} is held by {self._leases[population].owner}")
        return lease

    def renew(self, population: str, owner: T, epoch: int, now: int) -> Optional[Lease[T]]:
        lease = self.holder(population, now)
        if lease is None or lease.epoch != epoch or lease.owner != owner:
            return None
        lease = Lease(population, owner, epoch, now + self.lease_ms)
        self._leases[population] = lease
        return lease

    def release(self, population: str, owner: T, epoch: int) -> bool:
        lease = self._leases.get(population)
        if lease is None or lease.epoch != epoch or lease.owner != owner:
            return False
        del self._leases[population]
        return True
