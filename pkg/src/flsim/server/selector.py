"""Selectors accept device connections and forward a sample of them to aggregators."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..protocol.messages import CheckIn, RejectWithWindow
from ..engine import stable_hash
from .actors import Actor, ActorRef
from .context import ServerContext
from .coordinator import Coordinator
from .messages import (
    AcceptDevice,
    CancelSelection,
    CoordinatorHello,
    DeviceCheckIn,
    Forward,
    HoldSelection,
    OpenSelection,
    PaceUpdate,
    SelectorStatus,
    Tick,
)


def reservoir_sample(items: Sequence, k: int, rng: np.random.Generator) -> list:
    """Uniform sample of ``k`` items from a stream seen once (algorithm R).

    The result keeps reservoir order, which depends only on the stream and the rng.
    """
    if k <= 0:
        return []
    reservoir = list(items[:k])
    for i in range(k, len(items)):
        j = int(rng.integers(0, i + 1))
        if j < k:
            reservoir[j] = items[i]
    return reservoir


class Selector(Actor):
    kind = "selector"

    def __init__(self, system, ref, parent, ctx: ServerContext, index: int):
        super().__init__(system, ref, parent)
        self.ctx = ctx
        self.index = index
        self.coordinator: Optional[ActorRef] = None
        self.epoch = 0
        self.round_id: Optional[str] = None
        self.accepting = False
        self.held: list[tuple[int, int]] = []  # (device_id, runtime_version) in arrival order
        self.stats = ctx.pace_stats(0, 1, 60_000)
        self.versions = {v for t in ctx.registry.tasks(ctx.population) for v in t.plans}

    def on_start(self) -> None:
        self.ctx.selector_directory[self.index] = self.ref
        self._watch()

    def receive(self, msg) -> None:
        if isinstance(msg, DeviceCheckIn):
            self._on_checkin(msg.device_id, msg.message)
        elif isinstance(msg, CoordinatorHello):
            if msg.epoch > self.epoch:
                # the previous owner's selection died with it
                self._release_all()
                self.round_id, self.accepting = None, False
            if msg.epoch >= self.epoch:
                self.epoch, self.coordinator = msg.epoch, msg.coordinator
        elif isinstance(msg, OpenSelection):
            if msg.epoch == self.epoch:
                self._release_all()
                self.round_id, self.accepting = msg.round_id, True
        elif isinstance(msg, HoldSelection):
            if msg.round_id == self.round_id:
                self.accepting = False
        elif isinstance(msg, CancelSelection):
            if msg.round_id == self.round_id:
                self._release_all()
                self.round_id, self.accepting = None, False
        elif isinstance(msg, Forward):
            if msg.round_id == self.round_id:
                self._forward(msg)
        elif isinstance(msg, PaceUpdate):
            self.stats = msg.stats
        elif isinstance(msg, Tick) and msg.name == "watch":
            self._watch()

    # -- coordinator liveness -------------------------------------------------

    def _watch(self) -> None:
        ctx = self.ctx
        lease = ctx.lock.holder(ctx.population, self.now)
        if lease is None:
            ref = self.system.new_ref(Coordinator, ctx.population)
            lease = ctx.lock.try_acquire(ctx.population, ref, self.now)
            if lease is not None:
                self.system.spawn(Coordinator, ctx.population, ctx, lease, ref=ref)
        if lease is not None:
            self.tell(lease.owner, self._status(lease.epoch))
        self.after(ctx.config.watch_every, Tick("watch"))

    def _status(self, epoch: Optional[int] = None) -> SelectorStatus:
        return SelectorStatus(self.index, self.ref, len(self.held), self.round_id, self.epoch if epoch is None else epoch)

    # -- devices --------------------------------------------------------------

    def _reject(self, device_id: int) -> None:
        net = self.ctx.network
        w = self.ctx.pace_policy.suggest_window(self.stats, self.now, device_id)
        net.unlink(device_id, self.ref)
        net.down(device_id, RejectWithWindow(self.ctx.population, w.start, w.end))

    def _on_checkin(self, device_id: int, msg: CheckIn) -> None:
        tel = self.ctx.telemetry
        tel.checkins.append(self.now)
        if not msg.attested or not any(v <= msg.runtime_version for v in self.versions):
            self._reject(device_id)
            return
        if self.accepting and self.round_id is not None and self.coordinator is not None:
            self.held.append((device_id, msg.runtime_version))
            self.tell(self.coordinator, self._status())
            return
        if self.round_id is not None:
            tel.event(self.now, self.round_id, "rejected", device_id)
        self._reject(device_id)

    def _release_all(self) -> None:
        held, self.held = self.held, []
        for device_id, _ in held:
            self._reject(device_id)

    def _forward(self, msg: Forward) -> None:
        rng = np.random.default_rng([stable_hash(msg.round_id), self.index])
        chosen = reservoir_sample(self.held, min(msg.quota, len(self.held)), rng)
        picked = {d for d, _ in chosen}
        aggs = msg.aggregators
        for j, (device_id, version) in enumerate(chosen):
            agg = aggs[(msg.offset + j) % len(aggs)]
            self.ctx.network.handoff(device_id, self.ref, agg)
            self.tell(agg, AcceptDevice(msg.round_id, device_id, version))
        rest = [(d, v) for d, v in self.held if d not in picked]
        self.held = rest
        self._release_all()
        self.round_id, self.accepting = None, False
