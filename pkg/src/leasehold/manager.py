"""Manager agents: propose against a grounded snapshot and execute under a lease, per device domain.

Managers hold no standing authority and no authoritative state.  Every inbound
envelope is handled against a freshly grounded snapshot, so a manager that
restarts between two envelopes behaves exactly like one that did not.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .bus import BROADCAST, Envelope, InProcessBus, Subscription, WillRegistration, inbox
from .commitstore import StateSnapshot
from .devices import Applied, DeviceRegistry, Faulted, Rejected, UnknownDevice, UnknownOperation
from .ids import IdGen
from .lease import AdapterCommand, Lease

log = logging.getLogger(__name__)

MAX_RESYNC_ATTEMPTS = 2
GROUND_RETRY_BASE_MS = 500
GROUND_RETRY_CAP_MS = 8_000


class ManagerError(Exception):
    pass


class LibrarianUnreachable(ManagerError):
    pass


class CapabilityMismatch(ManagerError):
    pass


class NoSuchDevice(ManagerError):
    pass


@dataclass(frozen=True)
class ManagerProfile:
    agent_id: str
    role: str
    capabilities: frozenset
    domain_devices: frozenset


@dataclass(frozen=True)
class Proposal:
    task_id: str
    device: str
    device_class: str
    operation: str
    params: Mapping[str, Any]
    base_commit: str
    rationale: str = ""
    intent_id: str | None = None
    resync_attempt: int = 0

    def payload(self) -> dict:
        return {
            "task_id": self.task_id,
            "device": self.device,
            "device_class": self.device_class,
            "operation": self.operation,
            "params": dict(self.params),
            "rationale": self.rationale,
            "intent_id": self.intent_id,
            "resync_attempt": self.resync_attempt,
        }

    @classmethod
    def from_payload(cls, p: Mapping[str, Any], base_commit: str) -> "Proposal":
        return cls(p["task_id"], p["device"], p["device_class"], p["operation"],
                   dict(p["params"]), base_commit, p.get("rationale", ""), p.get("intent_id"),
                   p.get("resync_attempt", 0))


@dataclass
class FaultConfig:
    """Fault-injection switches for the harness."""

    crash_after_msgs: int | None = None
    on_crash: Callable[["Manager"], None] | None = None
    replay: list[Envelope] = field(default_factory=list)


class Manager:
    def __init__(self, profile: ManagerProfile, bus: InProcessBus, sched, reader,
                 devices: DeviceRegistry, ids: IdGen | None = None, root_id: str = "rupert",
                 heartbeat_interval: int = 60_000, freshness=None, ground_cache_ms: int = 0):
        self.profile = profile
        self.agent_id = profile.agent_id
        self.bus = bus
        self.sched = sched
        self.reader = reader  # anything with snapshot(); the librarian in-process
        self.devices = devices
        self.ids = ids or IdGen()
        self.root_id = root_id
        self.heartbeat_interval = heartbeat_interval
        self.freshness = freshness  # (device, base) -> invalidating commit or None
        self.ground_cache_ms = ground_cache_ms
        self.faults = FaultConfig()
        self.up = False
        self.sent: list[Envelope] = []
        self._inbox: Subscription | None = None
        self._hb_timer = None
        self._seq = 0
        self._handled = 0
        self._grounded: tuple[int, StateSnapshot] | None = None

    # -- lifecycle -------------------------------------------------------

    def start(self) -> Envelope:
        self.bus.connect(self.agent_id)
        self._inbox = self.bus.subscribe(self.agent_id, inbox(self.agent_id))
        will = Envelope(self.ids.token("msg"), self.agent_id, BROADCAST, "will",
                        {"agent": self.agent_id, "role": self.profile.role},
                        sent_at=self.sched.now())
        self.bus.register_will(WillRegistration(self.agent_id, will))
        self.up = True
        self._handled = 0
        hb = self.heartbeat()
        self._schedule_heartbeat()
        return hb

    def stop(self) -> None:
        self._halt()
        self.bus.disconnect(self.agent_id, clean=True)

    def crash(self) -> Envelope | None:
        self._halt()
        return self.bus.disconnect(self.agent_id, clean=False)

    def _halt(self) -> None:
        self.up = False
        self._grounded = None
        if self._hb_timer is not None:
            self.sched.cancel(self._hb_timer)
            self._hb_timer = None

    def resync_after_restart(self, replay: list[Envelope] | None = None) -> Envelope:
        """Reconnect and announce the freshly grounded HEAD before anything else."""
        first = self.start()
        for old in replay or ():
            # pre-crash command resent verbatim apart from the envelope id
            self._publish(old.kind, old.topic, dict(old.payload), old.base_commit, old.lease_id)
        return first

    def _schedule_heartbeat(self) -> None:
        def beat():
            self._hb_timer = None
            if self.up:
                self.heartbeat()
                self._schedule_heartbeat()
        self._hb_timer = self.sched.call_later(self.heartbeat_interval, beat)

    def heartbeat(self) -> Envelope:
        self._seq += 1
        try:
            head = self.ground().head
        except LibrarianUnreachable:
            head = None  # liveness must not depend on the librarian
        return self._publish("heartbeat", BROADCAST, {
            "agent": self.agent_id, "role": self.profile.role,
            "capabilities": sorted(self.profile.capabilities), "seq": self._seq,
            "head": head,
        })

    # -- event loop ------------------------------------------------------

    def has_pending(self) -> bool:
        return self.up and self._inbox is not None and len(self._inbox) > 0

    def step(self) -> None:
        e = self._inbox.get_nowait()
        if e is None:
            return
        self._handled += 1
        if self.faults.crash_after_msgs is not None and self._handled >= self.faults.crash_after_msgs:
            self.faults.crash_after_msgs = None
            if self.faults.on_crash:
                self.faults.on_crash(self)
            else:
                self.crash()
            return
        self._handle_or_defer(e, 0)

    def _handle_or_defer(self, e: Envelope, tries: int) -> None:
        try:
            self.handle(e)
        except LibrarianUnreachable as exc:
            delay = min(GROUND_RETRY_CAP_MS, GROUND_RETRY_BASE_MS * 2 ** tries)
            log.warning("%s: %s; retrying %s in %d ms", self.agent_id, exc, e.kind, delay)
            self.sched.call_later(delay, lambda: self.up and self._handle_or_defer(e, tries + 1))

    def handle(self, e: Envelope) -> list[Envelope]:
        before = len(self.sent)
        if e.kind == "task_dispatch":
            self._on_dispatch(e)
        elif e.kind == "lease_grant":
            self._on_grant(e)
        elif e.kind == "exec_ack":
            self._on_ack(e)
        elif e.kind == "rejection":
            self._on_rejection(e)
        return self.sent[before:]

    def _publish(self, kind: str, topic: str, payload: dict, base_commit: str | None = None,
                 lease_id: str | None = None) -> Envelope:
        e = Envelope(self.ids.token("msg"), self.agent_id, topic, kind, payload,
                     base_commit, lease_id, self.sched.now())
        self.bus.publish(e)
        self.sent.append(e)
        return e

    # -- protocol stages -------------------------------------------------

    def ground(self) -> StateSnapshot:
        now = self.sched.now()
        if self._grounded and self.ground_cache_ms and now - self._grounded[0] < self.ground_cache_ms:
            return self._grounded[1]
        try:
            snap = self.reader.snapshot()
        except Exception as exc:  # reader is remote in deployment
            raise LibrarianUnreachable(str(exc)) from exc
        self._grounded = (now, snap)
        return snap

    def propose(self, task: Mapping[str, Any], snap: StateSnapshot) -> list[Proposal]:
        if task["capability"] not in self.profile.capabilities:
            raise CapabilityMismatch(f"{self.agent_id} lacks {task['capability']}")
        devices = self.devices.of_class(task["device_class"], set(self.profile.domain_devices))
        if not devices:
            raise NoSuchDevice(f"no {task['device_class']} device in {self.agent_id}'s domain")
        return [
            Proposal(task["task_id"], d, task["device_class"], task["operation"],
                     dict(task["params"]), snap.head, task.get("justification", ""),
                     task["intent_id"])
            for d in devices
        ]

    def _on_dispatch(self, e: Envelope) -> None:
        task = e.payload["task"]
        snap = self.ground()
        try:
            proposals = self.propose(task, snap)
        except (CapabilityMismatch, NoSuchDevice) as exc:
            self._publish("proposal", inbox(self.root_id), {
                "task_id": task["task_id"], "nack": type(exc).__name__, "detail": str(exc),
            }, snap.head)
            return
        for p in proposals:
            self._publish("proposal", inbox(self.root_id), p.payload(), p.base_commit)

    def _on_grant(self, e: Envelope) -> None:
        lease = Lease.from_dict(e.payload["lease"])
        prop = e.payload["proposal"]
        cmd = AdapterCommand(prop["device"], prop["operation"], prop["params"], self.agent_id,
                             lease.lease_id, prop["device_class"])
        snap = self.ground()
        self._publish("exec_request", inbox(self.root_id), {
            "task_id": e.payload["task_id"], "intent_id": prop.get("intent_id"),
            "command": cmd.to_dict(), "resync_attempt": prop.get("resync_attempt", 0),
        }, snap.head, lease.lease_id)

    def _on_ack(self, e: Envelope) -> None:
        lease = Lease.from_dict(e.payload["lease"])
        cmd = AdapterCommand.from_dict(e.payload["command"])
        self.execute(e.payload["task_id"], cmd, lease, e.payload.get("intent_id"))

    def execute(self, task_id: str, cmd: AdapterCommand, lease: Lease,
                intent_id: str | None) -> Envelope:
        snap = self.ground()
        result: dict[str, Any] = {
            "task_id": task_id, "lease_id": lease.lease_id, "device": cmd.device_id,
            "device_class": cmd.device_class, "intent_id": intent_id,
        }
        try:
            r = self.devices.apply(cmd, lease, self.sched.now(), snap.head, self.freshness)
        except (UnknownDevice, UnknownOperation) as exc:
            r = Faulted(str(exc), {"fault": type(exc).__name__})
        if isinstance(r, Applied):
            result.update(outcome="ok", detail="applied", resulting_state=dict(r.state))
        elif isinstance(r, Rejected):
            result.update(outcome="failed", detail=f"AdapterRejected({r.decision.code})",
                          diagnosis={"adapter_rejected": r.decision.to_dict()})
        else:
            result.update(outcome="failed", detail=f"AdapterFault: {r.detail}",
                          diagnosis=dict(r.diagnosis))
        return self._publish("exec_result", inbox(self.root_id), result, snap.head,
                             lease.lease_id)

    def _on_rejection(self, e: Envelope) -> None:
        p = e.payload
        # A freshness rejection means our view was stale: re-ground and ask again.
        if p.get("stage") != "freshness" or p.get("resync_attempt", 0) >= MAX_RESYNC_ATTEMPTS:
            return
        prop = p.get("proposal")
        if prop is None:
            return
        snap = self.ground()
        fresh = Proposal.from_payload(
            {**prop, "resync_attempt": p.get("resync_attempt", 0) + 1}, snap.head)
        self._publish("proposal", inbox(self.root_id), fresh.payload(), fresh.base_commit)
