"""Master aggregator (one per round) and the aggregators it spawns.

Aggregators own the device connections of a round and keep partial sums; the
master owns the round state, combines the partials, and is the only writer of the
ledger. Nothing reaches the ledger before the full aggregate exists.
"""

from __future__ import annotations

import math
from functools import reduce
from typing import Optional

import numpy as np

from ..fedavg import AggregateState, ModelParams, ModelUpdate, ZeroWeight, absorb_update, finalize_round, merge_aggregates
from ..pace import PopulationStats
from ..plans import DeployedTask
from ..protocol.messages import (
    Abort,
    CheckInAccepted,
    Configure,
    MaskedInput,
    Report,
    ReportAck,
    RevealRequest,
    RevealShares,
    ShareBundle,
)
from ..protocol.rounds import Phase, RoundState, reporting_tick
from ..secagg import (
    BelowThreshold,
    FixedVector,
    GroupSum,
    SecAggGroup,
    SecAggSession,
    compose_hierarchical,
    finalize,
    prepare,
)
from .actors import Actor, ActorRef, ChildDied
from .context import ServerContext
from .coordinator import CLOSE_CODES
from .messages import (
    AcceptDevice,
    AggregatorAssignment,
    AggregatorDone,
    AggregatorsReady,
    BeginReporting,
    CloseRound,
    DeviceConfigured,
    DeviceDisconnected,
    DeviceFrame,
    DeviceLost,
    DeviceReported,
    PartialAggregate,
    RoundFinished,
    Tick,
)


def aggregator_count(configured: int, capacity: int, secagg_k: int = 0, group_target: int = 100) -> int:
    """Aggregators to spawn for a round; 0 means secure groups of size k cannot be formed."""
    if secagg_k:
        return min(math.ceil(configured / group_target), configured // secagg_k)
    return max(1, math.ceil(configured / capacity))


class Aggregator(Actor):
    kind = "aggregator"

    def __init__(
        self,
        system,
        ref,
        parent,
        ctx: ServerContext,
        task: DeployedTask,
        round_id: str,
        weights: np.ndarray,
        stats: PopulationStats,
        index: int,
        secagg_k: int,
    ):
        super().__init__(system, ref, parent)
        self.ctx = ctx
        self.task = task
        self.round_id = round_id
        self.weights = weights
        self.stats = stats
        self.index = index
        self.k = secagg_k
        self.training = task.config.kind == "training"
        self.dim = task.config.model_dim
        self.devices: dict[int, str] = {}
        self.partial = AggregateState.empty(self.dim)
        self.loss_sum = 0.0
        self.examples = 0
        self.expected = 0
        self.closed = False
        self.sent_partial = False
        self.session: Optional[SecAggSession] = None
        self.revealed: dict[int, dict] = {}
        self.reveal_wait: set[int] = set()

    @property
    def pop(self) -> str:
        return self.ctx.population

    def receive(self, msg) -> None:
        if isinstance(msg, DeviceFrame):
            m = msg.message
            if isinstance(m, Report):
                self._on_report(msg.device_id, m)
            elif isinstance(m, MaskedInput):
                self._on_masked(msg.device_id, m)
            elif isinstance(m, RevealShares):
                self._on_reveal(msg.device_id, m)
        elif isinstance(msg, AcceptDevice):
            self._accept(msg)
        elif isinstance(msg, DeviceDisconnected):
            self._on_lost(msg.device_id, msg.reason)
        elif isinstance(msg, AggregatorAssignment):
            self.expected = msg.expected
        elif isinstance(msg, BeginReporting):
            self.after(msg.deadline - self.now, Tick("teardown"))
            if self.k:
                self._prepare()
        elif isinstance(msg, CloseRound):
            self._close(msg.completed)
        elif isinstance(msg, Tick):
            if msg.name == "teardown":
                self._teardown()
            elif msg.name == "reveal_timeout":
                self._finish_secagg()

    # -- devices --------------------------------------------------------------

    def _send(self, device_id: int, msg, attachment=None) -> None:
        self.ctx.network.down(device_id, msg, sender=self.ref, round_id=self.round_id, attachment=attachment)

    def _accept(self, msg: AcceptDevice) -> None:
        dev = msg.device_id
        if self.closed:
            self._send(dev, Abort(self.pop, self.round_id, "round closed"))
            self.ctx.network.unlink(dev, self.ref)
            return
        version = self.task.plan_for(msg.runtime_version)
        self.devices[dev] = "configured"
        self.ctx.telemetry.event(self.now, self.round_id, "forward", dev)
        self._send(dev, CheckInAccepted(self.pop, self.round_id, dev))
        self._send(dev, Configure(self.pop, self.round_id, self.task.plan_bytes[version], self.weights))
        self.tell(self.parent, DeviceConfigured(self.ref, dev))

    def _ack(self, dev: int, accepted: bool) -> None:
        w = self.ctx.pace_policy.suggest_window(self.stats, self.now, dev)
        self.ctx.network.down(dev, ReportAck(self.pop, self.round_id, accepted, w.start, w.end), round_id=self.round_id)
        self.ctx.telemetry.event(self.now, self.round_id, "report_accepted" if accepted else "report_rejected", dev)

    def _on_report(self, dev: int, msg: Report) -> None:
        if self.devices.get(dev) != "configured" or self.k:
            return
        self.ctx.network.unlink(dev, self.ref)
        if self.closed:
            self.devices[dev] = "rejected"
            self._ack(dev, False)
            return
        if self.training:
            self.partial = absorb_update(self.partial, ModelUpdate(msg.delta, msg.weight))
        else:
            loss = dict(msg.metrics).get("loss", 0.0)
            self.loss_sum += loss * msg.weight
            self.examples += msg.weight
            self.partial = AggregateState(self.partial.weighted_sum, self.partial.weight_sum, self.partial.contributions + 1)
        self.devices[dev] = "reported"
        self._ack(dev, True)
        self.tell(self.parent, DeviceReported(self.ref, dev))

    def _on_lost(self, dev: int, reason: str) -> None:
        status = self.devices.get(dev)
        if status == "configured":
            self.devices[dev] = "lost"
            self.tell(self.parent, DeviceLost(self.ref, dev, reason))
        elif dev in self.reveal_wait:
            self.reveal_wait.discard(dev)
            if not self.reveal_wait:
                self._finish_secagg()

    # -- secure aggregation ---------------------------------------------------

    def _prepare(self) -> None:
        members = sorted(d for d, s in self.devices.items() if s == "configured")
        if len(members) < self.k:
            return
        nonce = f"{self.round_id}/{self.index}".encode()
        group = SecAggGroup.create(members, nonce, k=self.k)
        prepared = prepare(group, self.system.engine.rng(f"secagg/{self.round_id}/{self.index}"))
        self.session = SecAggSession(group, prepared.active, prepared.public_keys, self.dim + 1)
        for m in prepared.active:
            bundle = prepared.bundles[m]
            shares = tuple((o, x, y) for o, (x, y) in sorted(bundle.shares_held.items()))
            self._send(m, ShareBundle(self.pop, self.round_id, m, shares), attachment=(group, bundle))

    def _on_masked(self, dev: int, msg: MaskedInput) -> None:
        s = self.session
        if self.devices.get(dev) != "configured" or s is None or dev not in s.active:
            return
        if self.closed:
            self.devices[dev] = "rejected"
            self.ctx.network.unlink(dev, self.ref)
            self._ack(dev, False)
            return
        s.add_masked(dev, FixedVector(msg.entries, s.scale))
        self.devices[dev] = "reported"
        self._ack(dev, True)  # the link stays open for the reveal step
        self.tell(self.parent, DeviceReported(self.ref, dev))

    def _on_reveal(self, dev: int, msg: RevealShares) -> None:
        if dev not in self.reveal_wait:
            return
        self.reveal_wait.discard(dev)
        self.revealed[dev] = {o: (x, y) for o, x, y in msg.shares}
        self.ctx.network.unlink(dev, self.ref)
        if not self.reveal_wait:
            self._finish_secagg()

    def _start_reveal(self) -> None:
        s = self.session
        if s is None or len(s.committed) < self.k:
            self._emit(None, 0, "group below minimum size")
            return
        dropped = tuple(s.dropped)
        self.reveal_wait = set(s.committed)
        for dev in s.committed:
            self._send(dev, RevealRequest(self.pop, self.round_id, dropped))
        self.after(self.ctx.config.reveal_timeout_ms, Tick("reveal_timeout"))

    def _finish_secagg(self) -> None:
        if self.sent_partial or self.session is None:
            return
        s = self.session
        try:
            total = finalize(s, self.revealed)
        except BelowThreshold as exc:
            self._emit(None, 0, str(exc))
            return
        self._emit(GroupSum(total, len(s.committed)), len(s.committed))

    # -- closing --------------------------------------------------------------

    def _emit(self, state, contributions: int, detail: str = "") -> None:
        if not self.sent_partial:
            self.sent_partial = True
            self.tell(self.parent, PartialAggregate(self.ref, state, contributions, detail))

    def _close(self, completed: bool) -> None:
        if self.closed:
            return
        self.closed = True
        if not completed:
            self._teardown()
            return
        if self.k:
            self._start_reveal()
        elif self.training:
            self._emit(self.partial, self.partial.contributions)
        else:
            self._emit((self.loss_sum, self.examples), self.partial.contributions)

    def _teardown(self) -> None:
        for dev, status in sorted(self.devices.items()):
            if status == "configured":
                self._send(dev, Abort(self.pop, self.round_id, "round closed"))
        if self.closed and self.k and not self.sent_partial:
            self._finish_secagg()
        self.closed = True
        self.tell(self.parent, AggregatorDone(self.ref))
        self.stop()


class MasterAggregator(Actor):
    kind = "master"

    def __init__(
        self,
        system,
        ref,
        parent,
        ctx: ServerContext,
        task: DeployedTask,
        round_number: int,
        state: RoundState,
        weights: np.ndarray,
        stats: PopulationStats,
    ):
        super().__init__(system, ref, parent)
        self.ctx = ctx
        self.task = task
        self.round_number = round_number
        self.state = state
        self.weights = np.asarray(weights, dtype=np.float64)
        self.stats = stats
        self.params = task.config.round_params
        self.rid = state.round_id
        plan = next(iter(task.plans.values()))
        self.training = task.config.kind == "training"
        self.k = plan.server_part.secagg_min_k if (plan.server_part.secagg_enabled and self.training) else 0
        self.configured: dict[int, ActorRef] = {}
        self.early_reports: set[int] = set()
        self.early_lost: set[int] = set()
        self.by_agg: dict[ActorRef, set[int]] = {}
        self.live_aggs: set[ActorRef] = set()
        self.waiting: set[ActorRef] = set()
        self.partials: list[PartialAggregate] = []
        self.finished = False

    def _trace(self, kind: str, device_id: int = -1, value: float = 0.0) -> None:
        self.ctx.telemetry.event(self.now, self.rid, kind, device_id, value)

    def on_start(self) -> None:
        cfg = self.ctx.config
        C = self.state.configured
        A = aggregator_count(C, cfg.aggregator_capacity, self.k, cfg.secagg_group_target)
        if A < 1:
            self._abandon()
            return
        for a in range(A):
            agg = self.spawn(
                Aggregator, f"{self.rid}/{a}", self.ctx, self.task, self.rid, self.weights, self.stats, a, self.k
            )
            self.by_agg[agg] = set()
            self.live_aggs.add(agg)
            self.tell(agg, AggregatorAssignment(self.rid, len(range(a, C, A)), self.k))
        self.tell(self.parent, AggregatorsReady(self.rid, tuple(sorted(self.live_aggs))))
        self.after(cfg.config_timeout_ms, Tick("config_timeout"))

    def receive(self, msg) -> None:
        phase = self.state.phase
        if isinstance(msg, DeviceConfigured):
            self.configured[msg.device_id] = msg.aggregator
            self.by_agg.setdefault(msg.aggregator, set()).add(msg.device_id)
            self._maybe_begin()
        elif isinstance(msg, DeviceReported):
            if phase is Phase.CONFIGURATION:
                self.early_reports.add(msg.device_id)
            elif phase is Phase.REPORTING and msg.device_id in self.state.participants:
                if msg.device_id not in self.state.lost:
                    self.state = self.state.record_report(msg.device_id)
                    self._tick()
        elif isinstance(msg, DeviceLost):
            self._lose([msg.device_id])
        elif isinstance(msg, PartialAggregate):
            if msg.aggregator in self.waiting:
                self.waiting.discard(msg.aggregator)
                self.partials.append(msg)
                if not self.waiting:
                    self._commit()
        elif isinstance(msg, AggregatorDone):
            self.live_aggs.discard(msg.aggregator)
            self._maybe_stop()
        elif isinstance(msg, ChildDied):
            self._aggregator_died(msg.child)
        elif isinstance(msg, Tick):
            if msg.name == "config_timeout" and phase is Phase.CONFIGURATION:
                self._begin_reporting()
            elif msg.name == "report_deadline" and phase is Phase.REPORTING:
                self._tick()

    # -- phases ---------------------------------------------------------------

    def _maybe_begin(self) -> None:
        if self.state.phase is Phase.CONFIGURATION and len(self.configured) >= self.state.configured:
            self._begin_reporting()

    def _lose(self, devices) -> None:
        devices = [d for d in devices if d in self.configured]
        phase = self.state.phase
        if phase is Phase.CONFIGURATION:
            for d in devices:
                if d not in self.early_lost:
                    self.early_lost.add(d)
                    self._trace("dropped", d)
        elif phase is Phase.REPORTING:
            fresh = [d for d in devices if d in self.state.participants and d not in self.state.lost]
            if fresh:
                for d in fresh:
                    self._trace("dropped", d)
                self.state = self.state.record_loss(fresh)
                self._tick()

    def _begin_reporting(self) -> None:
        participants = set(self.configured) - self.early_lost
        if len(participants) < self.params.goal_count:
            self._abandon()
            return
        self.state = self.state.begin_reporting(participants, self.now, self.params)
        for d in sorted(self.early_reports & participants):
            self.state = self.state.record_report(d)
        self._trace("reporting", value=len(participants))
        deadline = self.state.reporting_deadline
        small = []
        for agg in sorted(self.live_aggs):
            members = self.by_agg.get(agg, set()) & participants
            if self.k and len(members) < self.k:
                small.append(agg)
                self.tell(agg, CloseRound(False))
            else:
                self.tell(agg, BeginReporting(deadline))
        for agg in small:
            self._lose(sorted(self.by_agg.get(agg, set())))
        self.after(deadline - self.now, Tick("report_deadline"))
        if self.state.phase is Phase.REPORTING:
            self._tick()

    def _tick(self) -> None:
        st = reporting_tick(self.state, self.params, self.now)
        if st is self.state:
            return
        self.state = st
        if st.phase is Phase.COMPLETED:
            done = st.reported | st.lost
            for d in sorted(st.participants - done):
                self._trace("aborted", d)
            self.waiting = set(self.live_aggs)
            for agg in sorted(self.live_aggs):
                self.tell(agg, CloseRound(True))
            if not self.waiting:
                self._commit()
        elif st.phase is Phase.ABANDONED:
            self._abandon()

    def _aggregator_died(self, agg: ActorRef) -> None:
        self.live_aggs.discard(agg)
        if agg in self.waiting:
            self.waiting.discard(agg)
            if not self.waiting:
                self._commit()
        elif self.state.phase in (Phase.CONFIGURATION, Phase.REPORTING):
            self._lose(sorted(self.by_agg.get(agg, set())))
        self._maybe_stop()

    # -- outcomes -------------------------------------------------------------

    def _abandon(self) -> None:
        if self.finished:
            return
        if not self.state.phase.terminal:
            self.state = self.state.abandon(self.now)
        for agg in sorted(self.live_aggs):
            self.tell(agg, CloseRound(False))
        self._finish("abandoned")

    def _finish(self, outcome: str, weights=None, metrics=None) -> None:
        self.finished = True
        self._trace("close", value=CLOSE_CODES[outcome])
        self.tell(self.parent, RoundFinished(self.rid, outcome, weights, metrics or {}))
        self._maybe_stop()

    def _maybe_stop(self) -> None:
        if self.finished and not self.live_aggs:
            self.stop()

    def _combine(self) -> tuple[Optional[AggregateState], dict]:
        parts = [p for p in self.partials if p.state is not None]
        if not self.training:
            loss = sum(p.state[0] for p in parts)
            examples = sum(p.state[1] for p in parts)
            contributions = sum(p.contributions for p in parts)
            if examples == 0:
                return None, {}
            metrics = {"eval_loss": loss / examples, "examples": examples, "contributions": contributions}
            return AggregateState(np.zeros(self.weights.size), examples, contributions), metrics
        if self.k:
            if not parts:
                return None, {}
            agg = compose_hierarchical([p.state for p in parts], self.k)
        else:
            agg = reduce(merge_aggregates, [p.state for p in parts], AggregateState.empty(self.weights.size))
        return agg, {"weight_sum": agg.weight_sum, "contributions": agg.contributions}

    def _commit(self) -> None:
        if self.finished:
            return
        agg, metrics = self._combine()
        if agg is None or agg.contributions < self.params.goal_count:
            self._finish("failed")
            return
        if self.training:
            try:
                new = finalize_round(agg, ModelParams(self.weights)).weights
            except ZeroWeight:
                self._finish("failed")
                return
        else:
            new = self.weights
        metrics["participants"] = len(self.state.participants)
        self.ctx.ledger.commit(
            self.task.name,
            self.round_number,
            self.rid,
            self.weights,
            new,
            metrics,
            kind=self.task.config.kind,
        )
        self._finish("completed", np.array(new), metrics)
