"""Population owner: runs selection, schedules rounds, and spawns master aggregators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..plans import DeployedTask
from ..protocol.rounds import Phase, RoundState, make_round_id, selection_tick
from .actors import Actor, ActorRef, ChildDied, Terminated
from .context import ServerContext
from .lock import Lease
from .messages import (
    AggregatorsReady,
    CancelSelection,
    CoordinatorHello,
    Forward,
    HoldSelection,
    OpenSelection,
    PaceUpdate,
    RoundFinished,
    SelectorStatus,
    Tick,
)

CLOSE_CODES = {"completed": 0, "abandoned": 1, "failed": 2}


def split_quota(total: int, held: dict[int, int]) -> dict[int, int]:
    """Split ``total`` over selectors in proportion to their held devices.

    Largest-remainder rounding; ties go to the lower selector index. No selector is
    asked for more devices than it holds.
    """
    indices = sorted(held)
    pool = sum(held[i] for i in indices)
    if pool <= 0 or total <= 0:
        return {i: 0 for i in indices}
    total = min(total, pool)
    exact = {i: total * held[i] / pool for i in indices}
    quota = {i: int(exact[i]) for i in indices}
    left = total - sum(quota.values())
    for i in sorted(indices, key=lambda i: (-(exact[i] - quota[i]), i))[:left]:
        quota[i] += 1
    return quota


@dataclass
class Selection:
    task: DeployedTask
    round_number: int
    state: RoundState
    held: dict = field(default_factory=dict)

    @property
    def round_id(self) -> str:
        return self.state.round_id


@dataclass
class ActiveRound:
    selection: Selection
    master: ActorRef
    forwarded: bool = False


class Coordinator(Actor):
    kind = "coordinator"

    def __init__(self, system, ref, parent, ctx: ServerContext, lease: Lease):
        super().__init__(system, ref, parent)
        self.ctx = ctx
        self.lease = lease
        self.epoch = lease.epoch
        self.selectors: dict[int, ActorRef] = {}
        self.serial = 0
        self.selecting: Optional[Selection] = None
        self.pending: Optional[Selection] = None  # configured, devices not yet forwarded
        self.active: Optional[ActiveRound] = None
        self.committed: dict[str, int] = {}
        self.models: dict[str, np.ndarray] = {}
        self.round_period = float(ctx.config.round_estimate_ms)
        self.last_open = 0

    # -- lifecycle ------------------------------------------------------------

    def on_start(self) -> None:
        ledger = self.ctx.ledger
        for task in self.ctx.registry.tasks(self.ctx.population):
            rec = ledger.latest(task.name)
            self.committed[task.name] = rec.round_number if rec else 0
            if rec is not None and task.config.kind == "training":
                self.models[task.name] = np.array(rec.weights)
        self.after(self.ctx.config.renew_every, Tick("renew"))
        self._open_selection()

    def receive(self, msg) -> None:
        if isinstance(msg, SelectorStatus):
            self._on_status(msg)
        elif isinstance(msg, AggregatorsReady):
            self._on_aggregators(msg)
        elif isinstance(msg, RoundFinished):
            self._on_finished(msg.round_id, msg.outcome, msg.weights)
        elif isinstance(msg, ChildDied):
            if self.active is not None and msg.child == self.active.master:
                self.ctx.telemetry.event(self.now, self.active.selection.round_id, "close", value=CLOSE_CODES["failed"])
                self._on_finished(self.active.selection.round_id, "failed", None)
        elif isinstance(msg, Terminated):
            self._forget_selector(msg.actor)
        elif isinstance(msg, Tick):
            if msg.name == "renew":
                self._renew()
            elif msg.name == "selection_deadline":
                if self.selecting is not None and self.selecting.round_id == msg.token:
                    self._progress_selection()

    def _renew(self) -> None:
        lease = self.ctx.lock.renew(self.ctx.population, self.ref, self.epoch, self.now)
        if lease is None:
            # someone else owns the population now; step aside
            self.system.kill(self.ref, "lease lost")
            return
        self.lease = lease
        self.after(self.ctx.config.renew_every, Tick("renew"))

    # -- selectors ------------------------------------------------------------

    def _on_status(self, msg: SelectorStatus) -> None:
        if msg.epoch > self.epoch:
            return
        if self.selectors.get(msg.index) != msg.selector:
            old = self.selectors.get(msg.index)
            if old is not None:
                self._forget_selector(old)
            self.selectors[msg.index] = msg.selector
            self.system.watch(self.ref, msg.selector)
            self.tell(msg.selector, CoordinatorHello(self.ref, self.epoch))
            self.tell(msg.selector, PaceUpdate(self._pace_stats()))
            if self.selecting is not None:
                self.tell(msg.selector, OpenSelection(self.selecting.round_id, self.selecting.state.target, self.epoch))
            return
        if self.selecting is not None and msg.round_id == self.selecting.round_id:
            self.selecting.held[msg.index] = msg.held
            self._progress_selection()

    def _forget_selector(self, ref: ActorRef) -> None:
        for i, r in list(self.selectors.items()):
            if r == ref:
                del self.selectors[i]
                for sel in (self.selecting, self.pending):
                    if sel is not None:
                        sel.held.pop(i, None)

    def _broadcast(self, msg) -> None:
        for i in sorted(self.selectors):
            self.tell(self.selectors[i], msg)

    def _pace_stats(self):
        if self.selecting is not None:
            target = self.now
        else:
            target = max(self.now + 1_000, int(self.last_open + self.round_period))
        rp = self._next_task_params()
        goal, timeout = (rp.goal_count, rp.selection_timeout) if rp else (1, 60_000)
        return self.ctx.pace_stats(target, goal, timeout)

    def _next_task_params(self):
        tasks = self.ctx.registry.tasks(self.ctx.population)
        return tasks[0].config.round_params if tasks else None

    # -- selection ------------------------------------------------------------

    def _in_flight(self, task: str) -> int:
        n = 0
        for sel in (self.pending, self.active.selection if self.active else None):
            if sel is not None and sel.task.name == task:
                n += 1
        return n

    def _pick_task(self) -> Optional[DeployedTask]:
        tasks = self.ctx.registry.tasks(self.ctx.population)
        for _ in range(len(tasks)):
            task = self.ctx.registry.next_task(self.ctx.population)
            done = self.committed.get(task.name, 0) + self._in_flight(task.name)
            if done < task.config.rounds:
                return task
        return None

    def _all_done(self) -> bool:
        tasks = self.ctx.registry.tasks(self.ctx.population)
        return all(self.committed.get(t.name, 0) >= t.config.rounds for t in tasks)

    def _open_selection(self) -> None:
        if self.selecting is not None or self.pending is not None:
            return
        if self.active is not None and not (self.ctx.config.pipelining and self.active.forwarded):
            return
        if self._all_done():
            self.ctx.done = True
            return
        task = self._pick_task()
        if task is None:
            return
        self.serial += 1
        number = self.committed.get(task.name, 0) + 1 + self._in_flight(task.name)
        rid = make_round_id(number, self.epoch, self.serial)
        params = task.config.round_params
        state = RoundState.open(rid, params, self.now)
        self.selecting = Selection(task, number, state)
        self.last_open = self.now
        self.ctx.telemetry.event(self.now, rid, "open", value=state.target)
        self._broadcast(PaceUpdate(self._pace_stats()))
        self._broadcast(OpenSelection(rid, state.target, self.epoch))
        self.after(params.selection_timeout, Tick("selection_deadline", rid))

    def _progress_selection(self) -> None:
        sel = self.selecting
        params = sel.task.config.round_params
        st = selection_tick(sel.state, sum(sel.held.values()), params, self.now)
        if st is sel.state:
            return
        sel.state = st
        if st.phase is Phase.CONFIGURATION:
            self.ctx.telemetry.event(self.now, sel.round_id, "configure", value=st.configured)
            self._broadcast(HoldSelection(sel.round_id))
            self.selecting = None
            self.pending = sel
            if self.active is None:
                self._launch(sel)
        elif st.phase is Phase.ABANDONED:
            self.ctx.telemetry.event(self.now, sel.round_id, "close", value=CLOSE_CODES["abandoned"])
            self._broadcast(CancelSelection(sel.round_id))
            self.selecting = None
            self._open_selection()
        self._broadcast(PaceUpdate(self._pace_stats()))

    # -- rounds ---------------------------------------------------------------

    def _model_for(self, task: DeployedTask) -> np.ndarray:
        if task.config.kind == "training":
            w = self.models.get(task.name)
        else:
            rec = self.ctx.ledger.latest_model()
            w = np.array(rec.weights) if rec is not None else None
        return w if w is not None else np.zeros(task.config.model_dim)

    def _launch(self, sel: Selection) -> None:
        from .aggregator import MasterAggregator

        master = self.spawn(
            MasterAggregator,
            sel.round_id,
            self.ctx,
            sel.task,
            sel.round_number,
            sel.state,
            self._model_for(sel.task),
            self._pace_stats(),
        )
        self.active = ActiveRound(sel, master)

    def _on_aggregators(self, msg: AggregatorsReady) -> None:
        act = self.active
        if act is None or act.selection.round_id != msg.round_id or act.forwarded:
            return
        sel = act.selection
        quotas = split_quota(sel.state.configured, sel.held)
        offset = 0
        for i in sorted(self.selectors):
            q = quotas.get(i, 0)
            self.tell(self.selectors[i], Forward(sel.round_id, q, offset, msg.aggregators))
            offset += q
        act.forwarded = True
        self.pending = None
        if self.ctx.config.pipelining:
            self._open_selection()

    def _on_finished(self, rid: str, outcome: str, weights) -> None:
        act = self.active
        if act is None or act.selection.round_id != rid:
            return
        sel = act.selection
        self.active = None
        if outcome == "completed":
            self.committed[sel.task.name] = sel.round_number
            if sel.task.config.kind == "training":
                self.models[sel.task.name] = np.asarray(weights, dtype=np.float64)
            self.round_period = 0.7 * self.round_period + 0.3 * (self.now - sel.state.opened_at)
        if not act.forwarded:
            # selectors still hold this round's devices
            self._broadcast(CancelSelection(rid))
            self.pending = None
        pending = self.pending
        if pending is not None:
            if outcome != "completed" and pending.task.name == sel.task.name:
                # the next round was selected against a model that never materialised
                pending.state = pending.state.abandon(self.now)
                self.ctx.telemetry.event(self.now, pending.round_id, "close", value=CLOSE_CODES["abandoned"])
                self._broadcast(CancelSelection(pending.round_id))
                self.pending = None
            else:
                self._launch(pending)
        if self.selecting is not None and outcome != "completed" and self.selecting.task.name == sel.task.name:
            self.ctx.telemetry.event(self.now, self.selecting.round_id, "close", value=CLOSE_CODES["abandoned"])
            self._broadcast(CancelSelection(self.selecting.round_id))
            self.selecting = None
        self._open_selection()
