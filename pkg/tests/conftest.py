from __future__ import annotations

from importlib import resources

import pytest

from leasehold.commitstore import CommitStore
from leasehold.lease import AdapterCommand, Grantee, LeaseTable
from leasehold.ids import IdGen
from leasehold.model import EventRecord
from leasehold.policy import evaluate, parse_policy


def data_text(name: str) -> str:
    return (resources.files("leasehold") / "data" / name).read_text()


@pytest.fixture
def demo_policy_text() -> str:
    return data_text("demo.policy")


@pytest.fixture
def demo_policy(demo_policy_text):
    return parse_policy(demo_policy_text)


def exec_ok(device: str, state: dict, task: str = "t1", lease: str = "l1",
            intent: str | None = None, device_class: str = "light") -> EventRecord:
    return EventRecord("exec_result", "jeeves", device, "ok", "applied",
                       {"task_id": task, "lease_id": lease},
                       {"device": device, "device_class": device_class, "intent_id": intent,
                        "resulting_state": state, "diagnosis": None})


def status(agent: str, detail: str = "tick") -> EventRecord:
    return EventRecord("agent_status", "rupert", agent, "ok", detail, {}, {"status": "live"})


@pytest.fixture
def store() -> CommitStore:
    return CommitStore("dewey")


def append(store: CommitStore, *events: EventRecord, ts: int = 1) -> str:
    return store.append_commit("dewey", list(events), store.snapshot(), ts).hash


def light_lease(head: str, now: int = 0, ttl: int = 30_000, agent: str = "jeeves"):
    """A lease and matching command built from the demo policy, as the root would."""
    policy = parse_policy(data_text("demo.policy"))
    params = {"brightness": 55, "tone": "club"}
    permit = evaluate(policy, "home_assistant", "light", "set_light", params)
    table = LeaseTable(IdGen(3))
    lease = table.issue_lease(permit, Grantee("home_assistant", agent), "light.living_room",
                              "set_light", head, head, now, "work from home", ttl=ttl)
    cmd = AdapterCommand("light.living_room", "set_light", params, agent, lease.lease_id, "light")
    return lease, cmd, table


# one line per acceptance criterion, printed after the run
VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
