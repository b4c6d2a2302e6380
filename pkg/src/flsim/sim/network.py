"""Simulated device links: delivery delays, byte accounting, and connection loss."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Any, Optional

from ..protocol.messages import CheckIn, Message, decode, encode
from ..server.actors import ActorRef, ActorSystem
from ..server.messages import DeviceCheckIn, DeviceDisconnected, DeviceFrame


class WireMismatch(Exception):
    pass


class Network:
    """Links between devices and server actors.

    Every wire message is encoded so traffic is measured in real frame bytes.
    Delivery takes ``latency + size / bandwidth``. When an actor dies, every device
    linked to it learns about the lost connection one latency later.
    """

    def __init__(
        self,
        system: ActorSystem,
        telemetry,
        latency_ms: int = 50,
        down_bytes_per_s: float = 2_000_000.0,
        up_bytes_per_s: float = 500_000.0,
        verify_wire: bool = False,
    ):
        self.system = system
        self.engine = system.engine
        self.telemetry = telemetry
        self.latency = int(latency_ms)
        self.down_rate = float(down_bytes_per_s)
        self.up_rate = float(up_bytes_per_s)
        self.verify_wire = verify_wire
        self.devices: dict[int, Any] = {}
        self.links: dict[int, set[ActorRef]] = defaultdict(set)
        self.by_actor: dict[ActorRef, set[int]] = defaultdict(set)
        system.on_death(self._actor_died)

    def register(self, device) -> None:
        self.devices[device.device_id] = device

    # -- links ----------------------------------------------------------------

    def link(self, device_id: int, ref: ActorRef) -> None:
        self.links[device_id].add(ref)
        self.by_actor[ref].add(device_id)

    def unlink(self, device_id: int, ref: ActorRef) -> None:
        self.links[device_id].discard(ref)
        self.by_actor[ref].discard(device_id)

    def linked(self, device_id: int, ref: ActorRef) -> bool:
        return ref in self.links.get(device_id, ())

    def handoff(self, device_id: int, src: ActorRef, dst: ActorRef) -> None:
        """Move a held device from a selector to an aggregator."""
        self.unlink(device_id, src)
        if self.system.is_alive(dst):
            self.link(device_id, dst)
        else:
            self.engine.after(self.latency, self._lost, device_id, dst)

    def _actor_died(self, ref: ActorRef, reason: str) -> None:
        for device_id in sorted(self.by_actor.pop(ref, ())):
            self.links[device_id].discard(ref)
            self.engine.after(self.latency, self._lost, device_id, ref)

    def _lost(self, device_id: int, ref: ActorRef) -> None:
        dev = self.devices.get(device_id)
        if dev is not None:
            dev.connection_lost(ref)

    # -- frames ---------------------------------------------------------------

    def _size(self, msg: Message) -> int:
        frame = encode(msg)
        if self.verify_wire and decode(frame) != msg:
            raise WireMismatch(f"{type(msg).__name__} does not survive a round trip")
        return len(frame)

    def _delay(self, size: int, rate: float) -> int:
        return self.latency + int(math.ceil(1000.0 * size / rate))

    def down(
        self,
        device_id: int,
        msg: Message,
        sender: Optional[ActorRef] = None,
        round_id: Optional[str] = None,
        attachment: Any = None,
    ) -> None:
        """Server to device. With a ``sender`` the frame needs a live link to be sent."""
        if sender is not None and not self.linked(device_id, sender):
            return
        size = self._size(msg)
        name = type(msg).__name__
        self.telemetry.bytes("down", name, size)
        if round_id is not None:
            self.telemetry.event(self.engine.now, round_id, "bytes_down", device_id, size)
        dev = self.devices.get(device_id)
        if dev is not None:
            self.engine.after(self._delay(size, self.down_rate), dev.deliver, msg, sender, attachment)

    def up(self, device_id: int, target: Optional[ActorRef], msg: Message, round_id: Optional[str] = None) -> bool:
        """Device to server. Returns False when the target is unreachable."""
        if target is None or not self.system.is_alive(target):
            return False
        size = self._size(msg)
        self.telemetry.bytes("up", type(msg).__name__, size)
        if round_id is not None:
            self.telemetry.event(self.engine.now, round_id, "bytes_up", device_id, size)
        if isinstance(msg, CheckIn):
            self.link(device_id, target)
            envelope = DeviceCheckIn(device_id, msg)
        else:
            envelope = DeviceFrame(device_id, msg)
        self.system.tell(target, envelope, self._delay(size, self.up_rate))
        return True

    def disconnect(self, device_id: int, target: ActorRef, round_id: str, reason: str) -> None:
        """Device drops a link; the actor notices one latency later."""
        if self.linked(device_id, target):
            self.unlink(device_id, target)
            self.system.tell(target, DeviceDisconnected(device_id, round_id, reason), self.latency)
