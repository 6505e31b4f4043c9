from __future__ import annotations

from leasehold.bus import BROADCAST, Envelope, InProcessBus, inbox
from leasehold.commitstore import CommitStore
from leasehold.harness import run_trace
from leasehold.librarian import FLUSH_INTERVAL_MS, Journal, Librarian, observe
from leasehold.sim import Scheduler

HEAD = "a" * 64
LEASE = {"lease_id": "lease-1", "grantee": {"role": "home_assistant", "agent": "jeeves"},
         "target": "light.living_room", "operation": "set_light",
         "envelope": {"constraints": {}, "open": True}, "base_commit": HEAD,
         "policy_commit": HEAD, "expires_at": 9, "justification": "why", "issued_at": 0}


def rig(tmp_path=None):
    sched = Scheduler()
    bus = InProcessBus()
    store = CommitStore("dewey", tmp_path, genesis_timestamp=sched.now())
    journal = Journal(tmp_path / "journal.log" if tmp_path else None)
    lib = Librarian(store, bus, sched, bus.audit_tap("dewey"), journal)
    lib.start()
    sched.add_agent(lib, priority=True)
    bus.connect("jeeves")
    bus.connect("rupert")
    return sched, bus, store, lib


def proposal(i: int) -> Envelope:
    return Envelope(f"p{i}", "jeeves", inbox("rupert"), "proposal",
                    {"task_id": f"t{i}", "device": "light.living_room", "device_class": "light",
                     "operation": "set_light", "params": {"brightness": i}, "rationale": ""},
                    base_commit=HEAD)


def result(i: int) -> Envelope:
    return Envelope(f"r{i}", "jeeves", inbox("rupert"), "exec_result",
                    {"task_id": f"t{i}", "lease_id": f"l{i}", "device": "light.living_room",
                     "device_class": "light", "intent_id": None, "outcome": "ok",
                     "detail": "applied", "resulting_state": {"brightness": i}},
                    base_commit=HEAD, lease_id=f"l{i}")


def test_heartbeat_is_not_recorded():
    e = Envelope("h", "jeeves", BROADCAST, "heartbeat", {"agent": "jeeves"})
    assert observe(e) == []


def test_lease_grant_carries_full_lease():
    e = Envelope("g", "rupert", inbox("jeeves"), "lease_grant",
                 {"task_id": "t1", "lease": LEASE, "proposal": {}}, lease_id="lease-1")
    (rec,) = observe(e)
    assert rec.kind == "lease_grant" and rec.refs["lease_id"] == "lease-1"
    assert rec.data["lease"] == LEASE


def test_unknown_kind_is_escalated_not_dropped():
    (rec,) = observe(Envelope("x", "jeeves", BROADCAST, "gossip", {}))
    assert rec.kind == "agent_status" and rec.outcome == "escalated"


def test_observe_is_pure():
    e = result(3)
    assert observe(e) == observe(e)


def test_exec_result_commits_immediately():
    sched, bus, store, lib = rig()
    before = len(store)
    bus.publish(result(1))
    sched.quiesce()
    assert len(store) == before + 1
    assert store.snapshot().shadows["light.living_room"].state == {"brightness": 1}


def test_burst_of_proposals_shares_one_commit():
    sched, bus, store, lib = rig()
    before = len(store)
    for i in range(10):
        bus.publish(proposal(i))
    sched.quiesce()
    assert len(store) == before
    sched.run_until(sched.now() + FLUSH_INTERVAL_MS)
    assert len(store) == before + 1
    assert len(store.commit(store.head()).events) == 10


def test_snapshot_replies_are_commit_consistent():
    sched, bus, store, lib = rig()
    bus.publish(result(4))
    sched.quiesce()
    req = Envelope("q", "jeeves", inbox("dewey"), "snapshot_request", {})
    a, b = lib.serve_snapshot(req), lib.serve_snapshot(req)
    assert a.payload == b.payload
    assert a.base_commit == store.head()
    assert store.snapshot_at(a.base_commit).to_dict() == {k: v for k, v in a.payload.items()
                                                          if k != "in_reply_to"}


def test_crash_before_flush_loses_nothing(tmp_path):
    sched, bus, store, lib = rig(tmp_path)
    for i in range(4):
        bus.publish(proposal(i))
    sched.quiesce()
    assert store.event_count() == 0
    lib.crash()
    bus.publish(proposal(9))  # arrives while the librarian is down
    lib2 = Librarian(CommitStore("dewey", tmp_path), bus, sched, lib.tap,
                     Journal(tmp_path / "journal.log"))
    lib2.start()
    sched.add_agent(lib2, priority=True)
    sched.run_until(sched.now() + 2 * FLUSH_INTERVAL_MS)
    evs = [ev for _, _, ev in lib2.store.iter_events()]
    assert sorted(ev.msg_id for ev in evs if ev.kind == "proposal") == \
        ["p0", "p1", "p2", "p3", "p9"]
    assert any(ev.subject == "dewey" and ev.outcome == "failed" for ev in evs)


def test_restart_does_not_duplicate(tmp_path):
    sched, bus, store, lib = rig(tmp_path)
    bus.publish(result(1))
    sched.quiesce()
    lib.crash()
    lib.start()
    sched.quiesce()
    assert [ev.msg_id for _, _, ev in store.iter_events()].count("r1") == 1


def test_librarian_never_commands():
    r = run_trace("scenes/all.trace", seed=3)
    sent = {e.kind for e in r.system.audit.seen if e.sender == "dewey"}
    assert not sent & {"task_dispatch", "proposal", "lease_grant", "exec_request"}


def test_record_count_is_stable_across_runs():
    a = run_trace("scenes/scene1.trace", seed=1).report
    b = run_trace("scenes/scene1.trace", seed=2).report
    assert a.events_produced == b.events_produced == a.events_persisted
