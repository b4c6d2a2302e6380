import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsim.engine import Engine, stable_hash
from flsim.server import (
    ActorSystem,
    ChildDied,
    DuplicateRound,
    LedgerError,
    LockService,
    LockUnavailable,
    RoundLedger,
    Terminated,
    UnknownActor,
    aggregator_count,
    reservoir_sample,
    split_quota,
    verify_chain,
)
from flsim.server.actors import Actor

# -- engine -------------------------------------------------------------------


def test_engine_orders_by_time_then_schedule_order():
    e = Engine()
    seen = []
    e.at(10, seen.append, "b")
    e.at(5, seen.append, "a")
    e.at(10, seen.append, "c")
    t = e.after(7, seen.append, "x")
    t.cancel()
    assert e.run(until=100) == 100
    assert seen == ["a", "b", "c"]
    with pytest.raises(ValueError):
        e.at(50, seen.append, "late")


def test_engine_stop_predicate():
    e = Engine()
    seen = []
    for i in range(5):
        e.at(i, seen.append, i)
    assert e.run(until=100, stop=lambda: len(seen) == 3) == 2


def test_named_streams_are_independent_and_reproducible():
    a, b = Engine(3), Engine(3)
    a.rng("x").random()
    assert a.rng("y").random() == b.rng("y").random()
    assert Engine(4).rng("y").random() != Engine(3).rng("y").random()
    assert stable_hash("a", 1) == stable_hash("a", 1) != stable_hash("a1")


# -- actors -------------------------------------------------------------------


class Echo(Actor):
    kind = "echo"

    def __init__(self, system, ref, parent, log):
        super().__init__(system, ref, parent)
        self.log = log

    def receive(self, msg):
        self.log.append((self.system.engine.now, self.ref.name, msg))


def test_actor_messages_and_child_death_notice():
    e = Engine()
    sys = ActorSystem(e, detection_delay=100)
    log = []
    parent = sys.spawn(Echo, "p", log)
    child = sys.spawn(Echo, "c", log, parent=parent)
    grandchild = sys.spawn(Echo, "g", log, parent=child)
    sys.tell(child, "hi", delay=5)
    e.run(until=10)
    gone = sys.kill(child, "boom")
    assert set(gone) == {child, grandchild}
    sys.tell(child, "lost")
    e.run(until=500)
    assert (5, "c", "hi") in log
    assert (110, "p", ChildDied(child, "boom")) in log
    assert sys.dead_letters == 1
    assert [r.name for r in sys.live()] == ["p"]
    assert [r.name for r in sys.spawned("echo")] == ["p", "c", "g"]
    with pytest.raises(UnknownActor):
        sys.kill(child)


def test_watch_and_supervise():
    e = Engine()
    sys = ActorSystem(e, detection_delay=50)
    log = []
    watcher = sys.spawn(Echo, "w", log)
    target = sys.spawn(Echo, "t", log)
    sys.watch(watcher, target)
    restarts = []
    sys.supervise("echo", lambda ref: restarts.append((e.now, ref.name)))
    sys.kill(target, "x")
    e.run(until=1000)
    assert (50, "w", Terminated(target, "x")) in log
    assert restarts == [(50, "t")]


# -- lock ---------------------------------------------------------------------


def test_lock_lease_lifecycle():
    lock = LockService(lease_ms=100)
    a = lock.acquire("pop", "a", 0)
    assert a.epoch == 1 and lock.try_acquire("pop", "b", 50) is None
    with pytest.raises(LockUnavailable):
        lock.acquire("pop", "b", 50)
    assert lock.renew("pop", "a", 1, 90).expires_at == 190
    assert lock.renew("pop", "b", 1, 90) is None
    b = lock.try_acquire("pop", "b", 190)
    assert b.epoch == 2 and lock.renew("pop", "a", 1, 191) is None
    assert lock.release("pop", "b", 2) and lock.holder("pop", 191) is None
    assert not lock.release("pop", "b", 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from(["acq", "renew", "release"]), st.integers(0, 60)), max_size=40))
def test_lock_never_has_two_holders(ops):
    lock = LockService(lease_ms=50)
    now = 0
    held = {}
    last_epoch = 0
    for who, op, dt in ops:
        now += dt
        if op == "acq":
            lease = lock.try_acquire("p", who, now)
            if lease:
                assert lease.epoch == last_epoch + 1
                last_epoch = lease.epoch
                held[who] = lease.epoch
        elif op == "renew" and who in held:
            lock.renew("p", who, held[who], now)
        elif op == "release" and who in held:
            lock.release("p", who, held.pop(who))
        h = lock.holder("p", now)
        live = [w for w, ep in held.items() if h is not None and h.owner == w and h.epoch == ep]
        assert len(live) <= 1


# -- ledger -------------------------------------------------------------------


def test_ledger_chain_and_tamper_detection():
    led = RoundLedger()
    w0, w1, w2 = np.zeros(2), np.ones(2), np.full(2, 2.0)
    led.commit("t", 1, "1-1-1", w0, w1, {"n": 3})
    with pytest.raises(DuplicateRound):
        led.commit("t", 1, "1-1-2", w0, w1, {})
    with pytest.raises(LedgerError):
        led.commit("t", 3, "3-1-3", w1, w2, {})
    with pytest.raises(LedgerError):
        led.commit("t", 2, "2-1-2", w0, w2, {})  # wrong base model
    led.commit("t", 2, "2-1-2", w1, w2, {})
    led.commit("e", 1, "1-1-3", w2, w2, {"loss": 0.5}, kind="evaluation")
    assert verify_chain(led.records) == []
    again = RoundLedger.loads(led.dumps())
    assert again.dumps() == led.dumps() and verify_chain(again.records) == []
    bad = led.dumps().replace('"n":3', '"n":4')
    assert any("hash mismatch" in p for p in verify_chain(RoundLedger.loads(bad).records))
    assert verify_chain(led.records[1:])  # first record missing


# -- small helpers ------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.dictionaries(st.integers(0, 7), st.integers(0, 200), max_size=8))
def test_split_quota_is_proportional_and_bounded(total, held):
    q = split_quota(total, held)
    assert set(q) == set(held)
    assert sum(q.values()) == min(total, sum(held.values()))
    for i in held:
        assert 0 <= q[i] <= held[i]


def test_reservoir_sample_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    for _ in range(4000):
        for x in reservoir_sample(list(range(10)), 3, rng):
            counts[x] += 1
    assert np.allclose(counts / 4000, 0.3, atol=0.03)
    assert reservoir_sample([1, 2], 5, rng) == [1, 2]


def test_aggregator_count():
    assert aggregator_count(130, 100) == 2
    assert aggregator_count(5, 100) == 1
    assert aggregator_count(250, 100, secagg_k=2, group_target=100) == 3
    assert aggregator_count(3, 100, secagg_k=5) == 0
