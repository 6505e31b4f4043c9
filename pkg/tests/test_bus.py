from __future__ import annotations

import threading

import pytest
from hypothesis import given, settings, strategies as st

from leasehold.bus import (AUDIT, BROADCAST, BusOverflow, Envelope, InProcessBus, MalformedEnvelope,
                           NotConnected, WillRegistration, inbox)
from leasehold.canonical import canonical_bytes


def env(i: int, sender: str = "jeeves", topic: str = BROADCAST, kind: str = "proposal",
        **kw) -> Envelope:
    return Envelope(f"m{sender}{i}", sender, topic, kind, {"n": i}, **kw)


def will_for(agent: str) -> WillRegistration:
    return WillRegistration(agent, Envelope(f"will-{agent}", agent, BROADCAST, "will",
                                            {"agent": agent}))


def test_exec_request_needs_lease_and_base():
    bus = InProcessBus()
    bus.connect("jeeves")
    with pytest.raises(MalformedEnvelope):
        bus.publish(env(1, kind="exec_request", base_commit="a" * 64))
    with pytest.raises(MalformedEnvelope):
        bus.publish(env(2, kind="exec_request", lease_id="l"))
    with pytest.raises(MalformedEnvelope):
        bus.publish(env(3, kind="heartbeat", base_commit="a" * 64))


def test_publish_requires_connection():
    with pytest.raises(NotConnected):
        InProcessBus().publish(env(1))


def test_heartbeat_reaches_root_and_tap():
    bus = InProcessBus()
    tap = bus.audit_tap()
    for a in ("rupert", "jeeves"):
        bus.connect(a)
    sub = bus.subscribe("rupert", BROADCAST)
    r = bus.publish(env(1, kind="heartbeat"))
    assert r.delivered == 2
    assert sub.get_nowait().msg_id == tap.get_nowait().msg_id == "mjeeves1"


def test_no_cross_talk_and_inbox_privacy():
    bus = InProcessBus()
    tap = bus.audit_tap()
    for a in ("rupert", "jeeves", "darcy"):
        bus.connect(a)
    j = bus.subscribe("jeeves", inbox("jeeves"))
    d = bus.subscribe("darcy", inbox("darcy"))
    with pytest.raises(ValueError):
        bus.subscribe("darcy", inbox("jeeves"))
    with pytest.raises(ValueError):
        bus.subscribe("darcy", AUDIT)
    bus.publish(env(1, sender="rupert", topic=inbox("jeeves"), kind="task_dispatch"))
    assert len(j) == 1 and len(d) == 0 and len(tap) == 1


def test_two_broadcast_subscribers_both_receive():
    bus = InProcessBus()
    for a in ("a", "b", "c"):
        bus.connect(a)
    sa, sb = bus.subscribe("a", BROADCAST), bus.subscribe("b", BROADCAST)
    for i in range(5):
        bus.publish(env(i, sender="c"))
    assert [e.msg_id for e in sa.drain()] == [e.msg_id for e in sb.drain()] == \
        [f"mc{i}" for i in range(5)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["jeeves", "darcy", "rupert"]), min_size=1, max_size=1000))
def test_tap_preserves_per_sender_order_and_counts(senders):
    bus = InProcessBus()
    tap = bus.audit_tap()
    for a in set(senders):
        bus.connect(a)
    counter = {}
    for s in senders:
        counter[s] = counter.get(s, 0) + 1
        bus.publish(env(counter[s], sender=s))
    seen = tap.drain()
    assert len(seen) == sum(bus.publish_counts.values()) == len(senders)
    for s in set(senders):
        ns = [e.payload["n"] for e in seen if e.sender == s]
        assert ns == sorted(ns)


def test_audit_is_union_of_topic_traffic():
    bus = InProcessBus()
    tap = bus.audit_tap()
    for a in ("rupert", "jeeves"):
        bus.connect(a)
    logs = {BROADCAST: bus.subscribe("rupert", BROADCAST),
            inbox("jeeves"): bus.subscribe("jeeves", inbox("jeeves"))}
    bus.publish(env(1, sender="rupert", topic=inbox("jeeves"), kind="task_dispatch"))
    bus.publish(env(2, sender="jeeves"))
    bus.publish(env(3, sender="rupert", topic=inbox("jeeves"), kind="lease_grant"))
    union = sorted(e.msg_id for s in logs.values() for e in s.drain())
    assert sorted(e.msg_id for e in tap.drain()) == union


def test_will_only_on_abrupt_drop_once_per_session():
    bus = InProcessBus()
    tap = bus.audit_tap()
    bus.connect("rupert")
    b = bus.subscribe("rupert", BROADCAST)
    bus.connect("jeeves")
    bus.register_will(will_for("jeeves"))
    bus.disconnect("jeeves", clean=True)
    assert len(b) == 0
    wills = 0
    for _ in range(3):
        bus.connect("jeeves")
        bus.register_will(will_for("jeeves"))
        bus.disconnect("jeeves", clean=False)
        bus.disconnect("jeeves", clean=False)  # already gone: no second will
        wills += sum(1 for e in b.drain() if e.kind == "will")
    assert wills == 3
    assert sum(1 for e in tap.drain() if e.kind == "will") == 3


def test_agents_cannot_forge_wills():
    bus = InProcessBus()
    bus.connect("jeeves")
    with pytest.raises(MalformedEnvelope):
        bus.publish(Envelope("x", "jeeves", BROADCAST, "will", {}))


def test_envelope_wire_is_canonical():
    e = env(1, base_commit="c" * 64)
    assert e.encode() == canonical_bytes(e.to_dict())
    assert Envelope.decode(e.encode()) == e
    assert set(e.to_dict()) == {"msg_id", "sender", "topic", "kind", "base_commit", "lease_id",
                                "payload", "sent_at"}


def test_backpressure_on_full_queue():
    bus = InProcessBus(queue_limit=2, publish_timeout=0.01)
    bus.connect("a")
    bus.subscribe("a", BROADCAST)
    bus.publish(env(1, sender="a"))
    bus.publish(env(2, sender="a"))
    with pytest.raises(BusOverflow):
        bus.publish(env(3, sender="a"))


def test_concurrent_publishers():
    bus = InProcessBus(queue_limit=10_000)
    tap = bus.audit_tap()
    senders = [f"s{i}" for i in range(8)]
    for s in senders:
        bus.connect(s)

    def run(s):
        for i in range(200):
            bus.publish(env(i, sender=s))

    threads = [threading.Thread(target=run, args=(s,)) for s in senders]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seen = tap.drain()
    assert len(seen) == 1600
    for s in senders:
        assert [e.payload["n"] for e in seen if e.sender == s] == list(range(200))
