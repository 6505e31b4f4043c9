from __future__ import annotations

from hypothesis import given, settings, strategies as st

from conftest import append, data_text, exec_ok
from leasehold.bus import Envelope, InProcessBus, inbox
from leasehold.commitstore import CommitStore
from leasehold.devices import DeviceRegistry, parse_fixture
from leasehold.harness import run_trace
from leasehold.ids import IdGen
from leasehold.lease import AdapterCommand, Grantee, LeaseTable
from leasehold.manager import LibrarianUnreachable, Manager, ManagerProfile
from leasehold.policy import OPEN_ENVELOPE, Permit
from leasehold.sim import Scheduler

JEEVES = ManagerProfile("jeeves", "home_assistant", frozenset({"light", "speaker", "camera"}),
                        frozenset({"light.living_room", "speaker.living_room",
                                   "camera.front_door"}))

TASKS = {
    "light": ("light", "set_light", {"brightness": 40, "tone": "warm"}),
    "speaker": ("speaker", "set_volume", {"volume": 20}),
    "camera": ("camera", "set_power", {"power": "on"}),
    "tv": ("tv", "set_power", {"power": "off"}),  # not jeeves's: nack
}
DEVICE = {"light": "light.living_room", "speaker": "speaker.living_room",
          "camera": "camera.front_door", "tv": "tv.living_room"}


def shared_store() -> CommitStore:
    s = CommitStore("dewey")
    append(s, exec_ok("light.living_room", {"brightness": 10}))
    return s


def rig(store):
    sched = Scheduler()
    bus = InProcessBus()
    bus.connect("rupert")
    out = bus.subscribe("rupert", inbox("rupert"))
    devices = DeviceRegistry(parse_fixture(data_text("demo.devices")))
    m = Manager(JEEVES, bus, sched, store, devices, IdGen(0))
    m.start()
    return m, out


def task(n: int, what: str) -> dict:
    cls, op, params = TASKS[what]
    return {"task_id": f"task-{n}", "intent_id": "intent-1", "capability": cls,
            "device_class": cls, "operation": op, "params": params,
            "justification": "because", "assigned_to": "jeeves"}


def inbound(script, head: str) -> list[Envelope]:
    """Turn an abstract script into concrete envelopes addressed to jeeves."""
    table = LeaseTable(IdGen(5))
    out = []
    for n, (kind, what) in enumerate(script):
        t = task(n, what)
        prop = {"task_id": t["task_id"], "device": DEVICE[what], "device_class": t["device_class"],
                "operation": t["operation"], "params": t["params"], "intent_id": "intent-1",
                "rationale": ""}
        lease = table.issue_lease(Permit(OPEN_ENVELOPE, None), Grantee("home_assistant", "jeeves"),
                                  DEVICE[what], t["operation"], head, head, Scheduler().now(),
                                  "because")
        if kind == "dispatch":
            payload = {"task": t, "intent": {"intent_id": "intent-1"}}
            e_kind, lid = "task_dispatch", None
        elif kind == "grant":
            payload = {"task_id": t["task_id"], "lease": lease.to_dict(), "proposal": prop}
            e_kind, lid = "lease_grant", lease.lease_id
        elif kind == "ack":
            cmd = AdapterCommand(DEVICE[what], t["operation"], t["params"], "jeeves",
                                 lease.lease_id, t["device_class"])
            payload = {"task_id": t["task_id"], "lease": lease.to_dict(),
                       "command": cmd.to_dict(), "intent_id": "intent-1"}
            e_kind, lid = "exec_ack", lease.lease_id
        else:
            stage, attempt = kind.split(":")
            payload = {"task_id": t["task_id"], "stage": stage, "code": "X",
                       "resync_attempt": int(attempt), "proposal": prop}
            e_kind, lid = "rejection", None
        out.append(Envelope(f"in-{n}", "rupert", inbox("jeeves"), e_kind, payload,
                            lease_id=lid))
    return out


def outputs(m: Manager) -> list[dict]:
    keep = []
    for e in m.sent:
        if e.kind == "heartbeat":
            continue
        d = e.to_dict()
        d.pop("msg_id")
        keep.append(d)
    return keep


script_st = st.lists(
    st.tuples(st.sampled_from(["dispatch", "grant", "ack", "freshness:0", "freshness:2",
                               "policy:0"]),
              st.sampled_from(sorted(TASKS))),
    min_size=1, max_size=12)


@settings(max_examples=1000, deadline=None)
@given(script_st, st.data())
def test_restart_between_envelopes_changes_nothing(script, data):
    store = shared_store()
    envs = inbound(script, store.head())
    k = data.draw(st.integers(0, len(envs)))

    steady, _ = rig(store)
    for e in envs:
        steady.handle(e)

    bounced, _ = rig(store)
    for i, e in enumerate(envs):
        if i == k:
            bounced.crash()
            bounced.start()
        bounced.handle(e)
    assert outputs(bounced) == outputs(steady)


def test_proposal_base_is_grounding_head():
    store = shared_store()
    m, out = rig(store)
    (e,) = inbound([("dispatch", "light")], store.head())
    (p,) = m.handle(e)
    assert p.kind == "proposal" and p.base_commit == store.head()
    assert p.payload["params"] == TASKS["light"][2]


def test_out_of_domain_dispatch_is_nacked():
    store = shared_store()
    m, _ = rig(store)
    (e,) = inbound([("dispatch", "tv")], store.head())
    (p,) = m.handle(e)
    assert p.payload["nack"] == "CapabilityMismatch"


def test_freshness_rejection_reproposes_on_new_head():
    store = shared_store()
    m, _ = rig(store)
    (e,) = inbound([("freshness:0", "light")], store.head())
    append(store, exec_ok("light.living_room", {"brightness": 20}), ts=2)
    (p,) = m.handle(e)
    assert p.base_commit == store.head() and p.payload["resync_attempt"] == 1
    (e,) = inbound([("freshness:2", "light")], store.head())
    assert m.handle(e) == []


def test_exec_result_reports_state():
    store = shared_store()
    m, _ = rig(store)
    (e,) = inbound([("ack", "light")], store.head())
    (r,) = m.handle(e)
    assert r.kind == "exec_result" and r.payload["outcome"] == "ok"
    assert r.payload["resulting_state"]["brightness"] == 40


class DownReader:
    def snapshot(self):
        raise ConnectionError("librarian down")


def test_heartbeat_survives_unreachable_librarian():
    m, _ = rig(shared_store())
    m.reader = DownReader()
    assert m.heartbeat().payload["head"] is None
    (e,) = inbound([("dispatch", "light")], "a" * 64)
    try:
        m.handle(e)
    except LibrarianUnreachable:
        pass
    else:
        raise AssertionError("grounding against a dead librarian must fail loudly")


def test_unreachable_librarian_defers_then_recovers():
    store = shared_store()
    m, out = rig(store)
    m.reader = DownReader()
    (e,) = inbound([("dispatch", "light")], store.head())
    m.bus.publish(e)
    m.step()
    assert not [x for x in m.sent if x.kind == "proposal"]
    m.reader = store
    m.sched.run_until(m.sched.now() + 1_000)
    assert [x.base_commit for x in m.sent if x.kind == "proposal"] == [store.head()]


def test_no_orphan_exec_requests():
    r = run_trace("scenes/all.trace", seed=11)
    granted = {}
    for e in r.system.audit.seen:
        if e.kind == "lease_grant":
            granted[e.lease_id] = e.topic
    injected = {i["msg_id"] for i in r.system.injections}
    for e in r.system.audit.seen:
        if e.kind == "exec_request" and e.msg_id not in injected:
            assert granted.get(e.lease_id) == inbox(e.sender)
