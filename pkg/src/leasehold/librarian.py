"""The librarian: sole writer of the commit store, fed only by the audit tap.

It never issues commands.  Envelopes are journaled on receipt, distilled into
event records, and committed in batches.  After a crash the journal is
replayed and anything not yet in the store is committed, so nothing is lost.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Iterator

from .bus import BROADCAST, Envelope, InProcessBus, Subscription, WillRegistration, inbox
from .commitstore import CommitStore, frame, iter_records
from .ids import IdGen
from .model import EventRecord

log = logging.getLogger(__name__)

FLUSH_INTERVAL_MS = 250
# Records that must reach HEAD before the next freshness check.  Agent failures
# are included because recovery reads the log right after the will arrives.
URGENT_KINDS = frozenset({"lease_grant", "lease_reject", "exec_result", "agent_status"})
SILENT_KINDS = frozenset(
    {"heartbeat", "snapshot_request", "snapshot_reply", "user_intent", "exec_request", "exec_ack"}
)


def observe(e: Envelope) -> list[EventRecord]:
    """Distill one envelope into zero or more event records.  Pure."""
    p = e.payload
    kind = e.kind
    if kind in SILENT_KINDS:
        return []
    if kind == "task_dispatch":
        task = p["task"]
        return [EventRecord(
            "task_dispatch", e.sender, task["task_id"],
            "ok" if task.get("assigned_to") else "rejected",
            p.get("reason", f"dispatch to {task.get('assigned_to')}"),
            {"task_id": task["task_id"], "intent_id": task["intent_id"]},
            {"task": task, "intent": p["intent"]}, e.msg_id)]
    if kind == "proposal":
        if p.get("nack"):
            return [EventRecord("proposal", e.sender, p["task_id"], "rejected",
                                f"{p['nack']}: {p.get('detail', '')}",
                                {"task_id": p["task_id"]}, {"nack": p["nack"]}, e.msg_id)]
        return [EventRecord(
            "proposal", e.sender, p["task_id"], "ok", p.get("rationale", ""),
            {"task_id": p["task_id"]},
            {"device": p["device"], "operation": p["operation"], "params": p["params"],
             "base_commit": e.base_commit}, e.msg_id)]
    if kind == "lease_grant":
        lease = p["lease"]
        return [EventRecord(
            "lease_grant", e.sender, lease["lease_id"], "ok", lease["justification"],
            {"lease_id": lease["lease_id"], "task_id": p["task_id"]}, {"lease": lease}, e.msg_id)]
    if kind in ("rejection", "lease_reject"):
        ev = p.get("evidence", {})
        lease_id = ev.get("lease_id") or e.lease_id or f"unleased:{p.get('task_id')}"
        refs = {"lease_id": lease_id}
        if p.get("task_id"):
            refs["task_id"] = p["task_id"]
        if ev.get("invalidating_commit"):
            refs["invalidating_commit"] = ev["invalidating_commit"]
        return [EventRecord(
            "lease_reject", e.sender, lease_id,
            "escalated" if p.get("escalated") else "rejected", p.get("reasoning", ""), refs,
            {"stage": p["stage"], "code": p.get("code"), "evidence": ev,
             "device": p.get("device")}, e.msg_id)]
    if kind == "exec_result":
        data = {k: p.get(k) for k in ("device", "device_class", "intent_id", "diagnosis")}
        data["resulting_state"] = p.get("resulting_state") or {}
        return [EventRecord(
            "exec_result", e.sender, p["device"], "ok" if p["outcome"] == "ok" else "failed",
            p.get("detail", ""), {"task_id": p["task_id"], "lease_id": p["lease_id"]},
            data, e.msg_id)]
    if kind == "conflict_report":
        report, res = p["report"], p["resolution"]
        return [
            EventRecord("conflict_report", e.sender, report["task_id"], "ok",
                        f"conflict on {report['device']}", {"task_id": report["task_id"]},
                        report, e.msg_id),
            EventRecord("conflict_resolution", e.sender, report["task_id"],
                        "escalated" if res["action"] == "escalate" else "ok", res["reasoning"],
                        {"task_id": report["task_id"],
                         "standing_intent": report["standing"]["intent_id"],
                         "incoming_intent": report["incoming"]["intent_id"]},
                        {"device": report["device"], "action": res["action"],
                         "winner": res["winner"], "evidence": res.get("evidence", [])},
                        e.msg_id),
        ]
    if kind == "recovery_outcome":
        task = p["task"]
        return [EventRecord(
            "recovery_outcome", e.sender, task["task_id"],
            "escalated" if p["action"] == "escalated" else "ok",
            f"{p['action']}: {p.get('reason', '')}", {"task_id": task["task_id"]},
            {"task": task, "action": p["action"], "failed_agent": p.get("failed_agent")},
            e.msg_id)]
    if kind == "agent_status":
        return [EventRecord("agent_status", e.sender, p["agent"], p.get("outcome", "ok"),
                            p.get("reason", ""), {}, {"status": p["status"]}, e.msg_id)]
    if kind == "will":
        return [EventRecord("agent_status", e.sender, p.get("agent", e.sender), "failed",
                            "last will: unexpected disconnect", {}, {"status": "disconnected"},
                            e.msg_id)]
    return [EventRecord("agent_status", e.sender, e.sender, "escalated",
                        f"unrecognised message kind {kind!r}", {}, {"kind": kind}, e.msg_id)]


class Journal:
    """Durable intake buffer: framed envelope records, in memory or on disk."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._mem: list[bytes] = []
        if self.path is not None and self.path.exists():
            self._mem = list(iter_records(self.path.read_bytes()))

    def append(self, e: Envelope) -> None:
        raw = e.encode()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(frame(raw))
                fh.flush()
                os.fsync(fh.fileno())
        self._mem.append(raw)

    def __iter__(self) -> Iterator[Envelope]:
        for raw in self._mem:
            yield Envelope.decode(raw)

    def __len__(self) -> int:
        return len(self._mem)


class Librarian:
    def __init__(self, store: CommitStore, bus: InProcessBus, sched, tap: Subscription,
                 journal: Journal | None = None, agent_id: str = "dewey",
                 flush_ms: int = FLUSH_INTERVAL_MS, ids: IdGen | None = None):
        self.agent_id = agent_id
        self.store = store
        self.bus = bus
        self.sched = sched
        self.tap = tap
        self.journal = journal if journal is not None else Journal()
        self.flush_ms = flush_ms
        self.ids = ids or IdGen()
        self.pending: list[EventRecord] = []
        self.produced = 0
        self.up = False
        self._flush_timer = None
        self._inbox: Subscription | None = None

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        self.bus.connect(self.agent_id)
        self._inbox = self.bus.subscribe(self.agent_id, inbox(self.agent_id))
        will = Envelope(self.ids.token("msg"), self.agent_id, BROADCAST, "will",
                        {"agent": self.agent_id}, sent_at=self.sched.now())
        self.bus.register_will(WillRegistration(self.agent_id, will))
        self.up = True
        self._recover_journal()

    def crash(self) -> None:
        """Lose all in-memory state; journal and store survive."""
        self.up = False
        self.pending = []
        if self._flush_timer is not None:
            self.sched.cancel(self._flush_timer)
            self._flush_timer = None
        self.bus.disconnect(self.agent_id, clean=False)

    def _recover_journal(self) -> None:
        done = self.store.persisted_msg_ids()
        for e in self.journal:
            if e.msg_id not in done:
                self.pending.extend(observe(e))
                done.add(e.msg_id)
        if self.pending:
            self.flush()

    def bootstrap_policy(self, text: str, sender: str = "operator") -> None:
        ev = EventRecord("policy_update", sender, "policy", "ok", "policy file loaded",
                         {}, {"text": text})
        self.produced += 1
        self.pending.append(ev)
        self.flush()

    # -- event loop ------------------------------------------------------

    def has_pending(self) -> bool:
        return self.up and (len(self.tap) > 0 or (self._inbox is not None and len(self._inbox) > 0))

    def step(self) -> None:
        if self._inbox is not None and len(self._inbox):
            req = self._inbox.get_nowait()
            if req is not None and req.kind == "snapshot_request":
                self.bus.publish(self.serve_snapshot(req))
            return
        e = self.tap.peek()
        if e is None:
            return
        self.journal.append(e)
        self.tap.get_nowait()  # ack only after the journal write
        records = observe(e)
        self.produced += len(records)
        self.pending.extend(records)
        if any(r.kind in URGENT_KINDS for r in records):
            self.flush()
        elif self.pending and self._flush_timer is None:
            self._flush_timer = self.sched.call_later(self.flush_ms, self._timed_flush)

    def _timed_flush(self) -> None:
        self._flush_timer = None
        if self.up and self.pending:
            self.flush()

    def flush(self):
        if not self.pending:
            return None
        return self.batch_commit(self.pending)

    def batch_commit(self, pending: list[EventRecord]):
        c = self.store.append_commit(self.agent_id, list(pending), self.store.snapshot(),
                                     self.sched.now())
        if pending is self.pending:
            self.pending = []
        if self._flush_timer is not None:
            self.sched.cancel(self._flush_timer)
            self._flush_timer = None
        log.debug("commit %s with %d events", c.hash[:12], len(c.events))
        return c

    # -- reads -----------------------------------------------------------

    def snapshot(self):
        return self.store.snapshot()

    def serve_snapshot(self, req: Envelope) -> Envelope:
        snap = self.store.snapshot()
        return Envelope(self.ids.token("msg"), self.agent_id, inbox(req.sender), "snapshot_reply",
                        {"in_reply_to": req.msg_id, **snap.to_dict()}, base_commit=snap.head,
                        sent_at=self.sched.now())
