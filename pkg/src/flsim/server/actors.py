"""Minimal actor runtime on top of the simulation engine.

Actors own their state, talk only through ``tell``, and drain their mailbox one
message at a time. Killing an actor kills its descendants; the parent learns about
it through a ``ChildDied`` message after a detection delay.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional

from ..engine import Engine, Timer


@dataclass(frozen=True, order=True)
class ActorRef:
    actor_id: int
    kind: str
    name: str

    @property
    def address(self) -> str:
        return f"{self.kind}/{self.name}#{self.actor_id}"

    def __str__(self) -> str:
        return self.address


@dataclass(frozen=True)
class ChildDied:
    child: ActorRef
    reason: str


@dataclass(frozen=True)
class Terminated:
    actor: ActorRef
    reason: str


class UnknownActor(Exception):
    pass


class Actor:
    kind = "actor"

    def __init__(self, system: "ActorSystem", ref: ActorRef, parent: Optional[ActorRef]):
        self.system = system
        self.ref = ref
        self.parent = parent
        self.children: list[ActorRef] = []
        self.alive = True
        self.mailbox: deque = deque()
        self._draining = False

    @property
    def now(self) -> int:
        return self.system.engine.now

    def on_start(self) -> None:
        pass

    def receive(self, msg: Any) -> None:
        raise NotImplementedError

    def on_stop(self) -> None:
        pass

    def tell(self, target: ActorRef, msg: Any, delay: int = 0) -> None:
        self.system.tell(target, msg, delay)

    def after(self, delay: int, msg: Any) -> Timer:
        """Deliver ``msg`` to self after ``delay`` ms (dropped if the actor is gone)."""
        return self.system.engine.after(delay, self.system._enqueue, self.ref, msg)

    def spawn(self, cls: type, name: str, *args, **kwargs) -> ActorRef:
        return self.system.spawn(cls, name, *args, parent=self.ref, **kwargs)

    def stop(self) -> None:
        self.system.stop(self.ref)


class ActorSystem:
    def __init__(self, engine: Engine, detection_delay: int = 1_000, latency: int = 0):
        self.engine = engine
        self.detection_delay = detection_delay
        self.latency = latency
        self._actors: dict[ActorRef, Actor] = {}
        self._ids = itertools.count(1)
        self._death_listeners: list[Callable[[ActorRef, str], None]] = []
        self._supervisors: dict[str, Callable[[ActorRef], None]] = {}
        self._watchers: dict[ActorRef, set[ActorRef]] = {}
        self.dead_letters = 0
        self.deaths: list[tuple[int, ActorRef, str]] = []
        self._spawn_log: list[ActorRef] = []

    # -- lifecycle ------------------------------------------------------------

    def new_ref(self, cls: type, name: str) -> ActorRef:
        """Reserve a reference before spawning (e.g. to register it in a lock first)."""
        return ActorRef(next(self._ids), cls.kind, name)

    def spawn(
        self,
        cls: type,
        name: str,
        *args,
        parent: Optional[ActorRef] = None,
        ref: Optional[ActorRef] = None,
        **kwargs,
    ) -> ActorRef:
        if ref is None:
            ref = self.new_ref(cls, name)
        elif ref in self._actors or ref.kind != cls.kind:
            raise ValueError(f"reference {ref} cannot be used for a new {cls.kind}")
        actor = cls(self, ref, parent, *args, **kwargs)
        self._actors[ref] = actor
        self._spawn_log.append(ref)
        if parent is not None:
            p = self._actors.get(parent)
            if p is None or not p.alive:
                raise UnknownActor(f"parent {parent} is not alive")
            p.children.append(ref)
        actor.on_start()
        return ref

    def is_alive(self, ref: Optional[ActorRef]) -> bool:
        a = self._actors.get(ref) if ref is not None else None
        return a is not None and a.alive

    def live(self, kind: Optional[str] = None) -> list[ActorRef]:
        return sorted(r for r, a in self._actors.items() if a.alive and (kind is None or r.kind == kind))

    def spawned(self, kind: Optional[str] = None) -> list[ActorRef]:
        """Every actor ever spawned, dead or alive, in spawn order."""
        return [r for r in self._spawn_log if kind is None or r.kind == kind]

    def actor(self, ref: ActorRef) -> Actor:
        """Direct access for tests and failure injection only."""
        try:
            return self._actors[ref]
        except KeyError:
            raise UnknownActor(str(ref)) from None

    def on_death(self, listener: Callable[[ActorRef, str], None]) -> None:
        self._death_listeners.append(listener)

    def watch(self, watcher: ActorRef, target: ActorRef) -> None:
        """``watcher`` receives ``Terminated`` after the detection delay when ``target`` dies."""
        if not self.is_alive(target):
            self.tell(watcher, Terminated(target, "not alive"), self.detection_delay)
            return
        self._watchers.setdefault(target, set()).add(watcher)

    def supervise(self, kind: str, restart: Callable[[ActorRef], None]) -> None:
        """Restart top-level actors of ``kind`` after the detection delay when they die."""
        self._supervisors[kind] = restart

    def _terminate(self, ref: ActorRef, reason: str, graceful: bool) -> list[ActorRef]:
        actor = self._actors.get(ref)
        if actor is None or not actor.alive:
            return []
        gone = []
        for child in list(actor.children):
            gone.extend(self._terminate(child, f"parent {ref.kind} died" if not graceful else "parent stopped", graceful))
        actor.alive = False
        actor.mailbox.clear()
        if graceful:
            actor.on_stop()
        gone.append(ref)
        self.deaths.append((self.engine.now, ref, reason))
        del self._actors[ref]
        for listener in self._death_listeners:
            listener(ref, reason)
        for w in sorted(self._watchers.pop(ref, ())):
            self.tell(w, Terminated(ref, reason), self.detection_delay)
        return gone

    def kill(self, ref: ActorRef, reason: str = "killed") -> list[ActorRef]:
        actor = self._actors.get(ref)
        if actor is None or not actor.alive:
            raise UnknownActor(f"{ref} is not alive")
        gone = self._terminate(ref, reason, graceful=False)
        self._after_death(ref, actor.parent, reason)
        return gone

    def stop(self, ref: ActorRef) -> None:
        actor = self._actors.get(ref)
        if actor is None:
            return
        parent = actor.parent
        self._terminate(ref, "stopped", graceful=True)
        if parent is not None and parent in self._actors:
            p = self._actors[parent]
            if ref in p.children:
                p.children.remove(ref)

    def _after_death(self, ref: ActorRef, parent: Optional[ActorRef], reason: str) -> None:
        if parent is not None:
            p = self._actors.get(parent)
            if p is not None and ref in p.children:
                p.children.remove(ref)
            self.tell(parent, ChildDied(ref, reason), self.detection_delay)
        elif ref.kind in self._supervisors:
            self.engine.after(self.detection_delay, self._supervisors[ref.kind], ref)

    # -- messaging ------------------------------------------------------------

    def tell(self, target: ActorRef, msg: Any, delay: int = 0) -> None:
        d = delay + self.latency
        if d <= 0:
            self._enqueue(target, msg)
        else:
            self.engine.after(d, self._enqueue, target, msg)

    def _enqueue(self, target: ActorRef, msg: Any) -> None:
        actor = self._actors.get(target)
        if actor is None or not actor.alive:
            self.dead_letters += 1
            return
        actor.mailbox.append(msg)
        if not actor._draining:
            actor._draining = True
            self.engine.after(0, self._drain, actor)

    def _drain(self, actor: Actor) -> None:
        while actor.alive and actor.mailbox:
            actor.receive(actor.mailbox.popleft())
        actor._draining = False
