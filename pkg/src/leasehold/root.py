"""Root orchestrator: decomposition, freshness, arbitration, leases, liveness, recovery.

Every state-changing proposal clears an ordered series of gates (see
:meth:`Root.grant`) before a lease is issued, and every exec_request is
re-checked for freshness and lease validity before the manager gets the go-ahead.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Mapping

from .bus import BROADCAST, Envelope, InProcessBus, Subscription, inbox
from .commitstore import CommitStore, StateSnapshot, UnknownCommit
from .ids import IdGen
from .lease import AdapterCommand, Grantee, LeaseTable
from .model import IN_FLIGHT_PHASES, IntentRecord, TaskStatus
from .planner import Planner, PlannerFailure
from .policy import Deny, evaluate

log = logging.getLogger(__name__)


@dataclass
class RootConfig:
    heartbeat_interval: int = 60_000
    lease_ttl: int = 30_000
    backoff_base: int = 2_000
    backoff_factor: int = 2
    backoff_cap: int = 60_000
    max_attempts: int = 5
    freshness_mode: str = "device_scoped"
    liveness_tick: int = 5_000

    def __post_init__(self) -> None:
        if self.freshness_mode not in ("device_scoped", "strict"):
            raise ValueError(f"unknown freshness mode {self.freshness_mode!r}")

    def backoff(self, attempts: int) -> int:
        return min(self.backoff_cap, self.backoff_base * self.backoff_factor ** (attempts - 1))


@dataclass(frozen=True)
class Freshness:
    fresh: bool
    invalidating: str | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.fresh


FRESH = Freshness(True)


def verify_freshness(store: CommitStore, base: str | None, device: str,
                     mode: str = "device_scoped") -> Freshness:
    head = store.head()
    if base == head:
        return FRESH
    if base is None or base not in store:
        return Freshness(False, None, f"unknown base commit {str(base)[:12]}")
    if mode == "strict":
        nxt = store.commits()[store.position(base) + 1]
        return Freshness(False, nxt.hash, "HEAD advanced")
    touched = store.first_touch_after(device, base)
    if touched is None:
        return FRESH
    return Freshness(False, touched, f"{device} changed in {touched[:12]} after {base[:12]}")


@dataclass(frozen=True)
class ConflictReport:
    device: str
    task_id: str
    standing: IntentRecord
    standing_state: Mapping[str, Any]
    incoming: IntentRecord
    incoming_params: Mapping[str, Any]
    detected_at: int

    def to_dict(self) -> dict:
        return {
            "device": self.device, "task_id": self.task_id,
            "standing": self.standing.to_dict(), "standing_state": dict(self.standing_state),
            "incoming": self.incoming.to_dict(), "incoming_params": dict(self.incoming_params),
            "detected_at": self.detected_at,
        }


@dataclass(frozen=True)
class Resolution:
    winner: IntentRecord | None
    action: str  # keep | supersede | escalate
    reasoning: str
    evidence: tuple = ()

    def to_dict(self) -> dict:
        return {"winner": self.winner.intent_id if self.winner else None, "action": self.action,
                "reasoning": self.reasoning, "evidence": list(self.evidence)}


def detect_conflict(device: str, params: Mapping[str, Any], incoming: IntentRecord,
                    snap: StateSnapshot, task_id: str = "", now: int = 0) -> ConflictReport | None:
    shadow = snap.shadows.get(device)
    if shadow is None:
        return None
    standing = snap.intent(shadow.provenance_intent)
    if standing is None or device not in standing.claimed_devices:
        return None
    if standing.intent_id == incoming.intent_id:
        return None
    if all(shadow.state.get(k) == v for k, v in params.items()):
        return None  # re-asserting the standing state is not a conflict
    return ConflictReport(device, task_id, standing, dict(shadow.state), incoming, dict(params), now)


def arbitrate(c: ConflictReport, evidence: tuple = ()) -> Resolution:
    s, i = c.standing, c.incoming
    if s.rank > i.rank:
        return Resolution(s, "keep", (
            f"{s.intent_id} is an active {s.origin} intent holding {c.device}; "
            f"{i.origin} intent {i.intent_id} must not override it"), evidence)
    if i.rank > s.rank:
        return Resolution(i, "supersede", (
            f"{i.origin} intent {i.intent_id} outranks {s.origin} intent {s.intent_id} "
            f"on {c.device}"), evidence)
    return Resolution(None, "escalate", (
        f"{s.intent_id} and {i.intent_id} are both {s.origin}; operator review needed"), evidence)


@dataclass
class ManagerInfo:
    agent_id: str
    role: str
    capabilities: frozenset
    last_heartbeat: int
    live: bool = True


class Root:
    def __init__(self, bus: InProcessBus, sched, store: CommitStore, planner: Planner,
                 ids: IdGen | None = None, config: RootConfig | None = None,
                 agent_id: str = "rupert"):
        self.agent_id = agent_id
        self.bus = bus
        self.sched = sched
        self.store = store  # read-only
        self.planner = planner
        self.ids = ids or IdGen()
        self.config = config or RootConfig()
        self.leases = LeaseTable(self.ids, default_ttl=self.config.lease_ttl)
        self.managers: dict[str, ManagerInfo] = {}
        self.tasks: dict[str, TaskStatus] = {}
        self.intents: dict[str, IntentRecord] = {}
        self.rejections: list[dict] = []
        self.conflicts: list[tuple[ConflictReport, Resolution]] = []
        self.recoveries: list[dict] = []
        self.validate_ns: list[int] = []
        self._retry_timers: dict[str, Any] = {}
        self._inbox: Subscription | None = None
        self._bcast: Subscription | None = None
        self._tick = None
        self.up = False

    def start(self) -> None:
        self.bus.connect(self.agent_id)
        self._inbox = self.bus.subscribe(self.agent_id, inbox(self.agent_id))
        self._bcast = self.bus.subscribe(self.agent_id, BROADCAST)
        self.up = True
        self._schedule_tick()

    def _schedule_tick(self) -> None:
        def tick():
            if self.up:
                self.liveness_tick(self.sched.now())
                self._schedule_tick()
        self._tick = self.sched.call_later(self.config.liveness_tick, tick)

    def has_pending(self) -> bool:
        return self.up and (len(self._inbox) > 0 or len(self._bcast) > 0)

    def step(self) -> None:
        e = self._bcast.get_nowait() or self._inbox.get_nowait()
        if e is not None:
            self.handle(e)

    def _publish(self, kind: str, topic: str, payload: dict, base_commit: str | None = None,
                 lease_id: str | None = None) -> Envelope:
        e = Envelope(self.ids.token("msg"), self.agent_id, topic, kind, payload, base_commit,
                     lease_id, self.sched.now())
        self.bus.publish(e)
        return e

    def handle(self, e: Envelope) -> None:
        now = self.sched.now()
        if e.kind == "user_intent":
            self.handle_intent(e.payload["intent"], e.payload.get("origin", "user_explicit"),
                               e.payload.get("description", ""))
        elif e.kind == "heartbeat":
            self._on_heartbeat(e, now)
        elif e.kind == "will":
            self.mark_unresponsive(e.payload.get("agent", e.sender), now, "last will received")
        elif e.kind == "proposal":
            self._on_proposal(e)
        elif e.kind == "exec_request":
            self.exec_gate(e)
        elif e.kind == "exec_result":
            self._on_result(e)

    # -- intents ---------------------------------------------------------

    def live_managers(self, capability: str | None = None, exclude: str | None = None) -> list[str]:
        return sorted(
            m.agent_id for m in self.managers.values()
            if m.live and m.agent_id != exclude
            and (capability is None or capability in m.capabilities)
        )

    def handle_intent(self, name: str, origin: str = "user_explicit",
                      description: str = "") -> list[TaskStatus]:
        now = self.sched.now()
        snap = self.store.snapshot()
        intent = IntentRecord(self.ids.serial("intent"), origin, now, description or name)
        self.intents[intent.intent_id] = intent
        try:
            subtasks = self.planner.decompose(name, snap)
        except PlannerFailure as exc:
            self._escalate_intent(intent, f"planner failure: {exc}")
            return []
        if not subtasks:
            self._escalate_intent(intent, f"no decomposition for {name!r}")
            return []
        out = []
        for st in subtasks:
            task = TaskStatus(self.ids.serial("task"), intent.intent_id, st.capability,
                              st.device_class, st.operation, dict(st.params),
                              justification=st.justification or name)
            out.append(self.dispatch(task, intent, snap.head))
        return out

    def _escalate_intent(self, intent: IntentRecord, reason: str) -> None:
        self._publish("agent_status", BROADCAST, {
            "agent": self.agent_id, "status": "intent_escalated", "outcome": "escalated",
            "reason": f"{intent.intent_id}: {reason}",
        })

    def dispatch(self, task: TaskStatus, intent: IntentRecord, head: str,
                 reason: str | None = None) -> TaskStatus:
        targets = self.live_managers(task.capability)
        if not targets:
            task = task.with_(assigned_to=None, phase="blocked")
            self._publish("task_dispatch", BROADCAST, {
                "task": task.to_dict(), "intent": intent.to_dict(),
                "reason": f"NoCapableManager for {task.capability}",
            }, head)
        else:
            task = task.with_(assigned_to=targets[0], phase="dispatched", lease_id=None,
                              next_retry_at=None)
            self._publish("task_dispatch", inbox(targets[0]), {
                "task": task.to_dict(), "intent": intent.to_dict(),
                "reason": reason or f"dispatch to {targets[0]}",
            }, head)
        self.tasks[task.task_id] = task
        return task

    # -- freshness, conflict, policy, lease ------------------------------

    def verify_freshness(self, base: str | None, device: str) -> Freshness:
        return verify_freshness(self.store, base, device, self.config.freshness_mode)

    def _staleness_probe(self, device: str, base: str) -> str | None:
        f = self.verify_freshness(base, device)
        return None if f.fresh else (f.invalidating or base)

    def _reject(self, to: str, task_id: str, stage: str, reasoning: str, *, code: str | None,
                lease_id: str, trigger: Envelope, invalidating: str | None = None,
                rule: str | None = None, proposal: dict | None = None, device: str | None = None,
                escalated: bool = False, resync_attempt: int = 0, head: str | None = None) -> Envelope:
        evidence = {"lease_id": lease_id}
        if invalidating:
            evidence["invalidating_commit"] = invalidating
        if rule:
            evidence["rule"] = rule
        payload = {
            "task_id": task_id, "stage": stage, "code": code, "evidence": evidence,
            "reasoning": reasoning, "in_reply_to": trigger.msg_id, "trigger_kind": trigger.kind,
            "device": device, "proposal": proposal, "escalated": escalated,
            "resync_attempt": resync_attempt, "checked_head": head or self.store.head(),
            "base_commit": trigger.base_commit,
        }
        self.rejections.append(payload)
        return self._publish("rejection", inbox(to), payload, lease_id=lease_id)

    def _on_proposal(self, e: Envelope) -> None:
        p = e.payload
        task = self.tasks.get(p["task_id"])
        if p.get("nack"):
            if task is not None:
                self.tasks[task.task_id] = task.with_(phase="blocked")
            return
        self.grant(task, e)

    def grant(self, task: TaskStatus | None, e: Envelope) -> Envelope:
        """Run the gates in their fixed order; the first one that fails rejects the proposal."""
        p = e.payload
        now = self.sched.now()
        head = self.store.head()
        lease_id = self.leases.new_id()
        device = p["device"]
        retry = p.get("resync_attempt", 0)
        common = dict(lease_id=lease_id, trigger=e, proposal=dict(p), device=device,
                      resync_attempt=retry, head=head)
        if task is None:
            return self._reject(e.sender, p["task_id"], "policy", "unknown task",
                                code="UnknownTask", **common)

        fresh = self.verify_freshness(e.base_commit, device)
        if not fresh:
            return self._reject(e.sender, task.task_id, "freshness", fresh.reason,
                                code="StaleCommit", invalidating=fresh.invalidating, **common)

        snap = self.store.snapshot()
        incoming = self.intents.get(task.intent_id) or snap.intent(task.intent_id)
        if incoming is not None:
            report = detect_conflict(device, p["params"], incoming, snap, task.task_id, now)
            if report is not None:
                evidence = tuple(
                    {"commit": c.hash, "kind": ev.kind, "intent": i.intent_id if i else None,
                     "origin": i.origin if i else None}
                    for c, ev, i in self.store.timeline_query(device)[-3:])
                res = arbitrate(report, evidence)
                self.conflicts.append((report, res))
                self._publish("conflict_report", BROADCAST,
                              {"report": report.to_dict(), "resolution": res.to_dict()}, head)
                if res.action == "keep":
                    self.tasks[task.task_id] = task.with_(phase="blocked")
                    return self._reject(e.sender, task.task_id, "conflict", res.reasoning,
                                        code="ConflictKeep", **common)
                if res.action == "escalate":
                    self.tasks[task.task_id] = task.with_(phase="escalated")
                    return self._reject(e.sender, task.task_id, "conflict", res.reasoning,
                                        code="ConflictEscalate", escalated=True, **common)

        info = self.managers.get(e.sender)
        if info is None:
            return self._reject(e.sender, task.task_id, "policy", f"{e.sender} is not a known manager",
                                code="UnknownManager", **common)
        verdict = evaluate(snap.policy, info.role, p["device_class"], p["operation"], p["params"])
        if isinstance(verdict, Deny):
            self.tasks[task.task_id] = task.with_(phase="blocked")
            return self._reject(e.sender, task.task_id, "policy", verdict.detail,
                                code=verdict.reason, rule=verdict.detail, **common)

        lease = self.leases.issue_lease(
            verdict, Grantee(info.role, e.sender), device, p["operation"], e.base_commit,
            snap.policy_commit, now, task.justification or p.get("rationale") or "approved",
            lease_id=lease_id)
        self.tasks[task.task_id] = task.with_(phase="granted", lease_id=lease.lease_id)
        return self._publish("lease_grant", inbox(e.sender), {
            "task_id": task.task_id, "lease": lease.to_dict(), "proposal": dict(p),
        }, head, lease.lease_id)

    def exec_gate(self, e: Envelope) -> Envelope:
        """Root-side check of an exec_request: envelope freshness, then the lease itself."""
        p = e.payload
        cmd = AdapterCommand.from_dict(p["command"])
        cmd = AdapterCommand(cmd.device_id, cmd.operation, cmd.params, e.sender, e.lease_id,
                             cmd.device_class)
        task_id = p.get("task_id", "")
        head = self.store.head()
        proposal = {"task_id": task_id, "device": cmd.device_id, "device_class": cmd.device_class,
                    "operation": cmd.operation, "params": dict(cmd.params),
                    "intent_id": p.get("intent_id"), "rationale": "resync after rejection"}
        common = dict(lease_id=e.lease_id, trigger=e, proposal=proposal, device=cmd.device_id,
                      resync_attempt=p.get("resync_attempt", 0), head=head)
        fresh = self.verify_freshness(e.base_commit, cmd.device_id)
        if not fresh:
            return self._reject(e.sender, task_id, "freshness", fresh.reason, code="StaleCommit",
                                invalidating=fresh.invalidating, **common)
        t0 = time.perf_counter_ns()
        decision = self.leases.validate(cmd, self.sched.now(), head, self._staleness_probe)
        self.validate_ns.append(time.perf_counter_ns() - t0)
        if not decision.accepted:
            return self._reject(e.sender, task_id, "lease", decision.detail, code=decision.code,
                                invalidating=decision.invalidating_commit, **common)
        lease = self.leases.get(e.lease_id)
        return self._publish("exec_ack", inbox(e.sender), {
            "task_id": task_id, "lease": lease.to_dict(), "command": cmd.to_dict(),
            "intent_id": p.get("intent_id"),
        }, head, lease.lease_id)

    def _on_result(self, e: Envelope) -> None:
        p = e.payload
        task = self.tasks.get(p["task_id"])
        if task is not None:
            phase = "confirmed" if p["outcome"] == "ok" else "escalated"
            if task.phase != "confirmed":
                self.tasks[task.task_id] = task.with_(phase=phase)

    # -- liveness and recovery ------------------------------------------

    def _on_heartbeat(self, e: Envelope, now: int) -> None:
        p = e.payload
        agent = p["agent"]
        info = self.managers.get(agent)
        caps = frozenset(p.get("capabilities", ()))
        if info is None:
            self.managers[agent] = ManagerInfo(agent, p["role"], caps, now)
            return
        info.last_heartbeat, info.capabilities, info.role = now, caps, p["role"]
        if not info.live:
            info.live = True
            self._publish("agent_status", BROADCAST, {
                "agent": agent, "status": "live", "outcome": "ok", "reason": "heartbeat resumed"})

    def liveness_tick(self, now: int) -> list[str]:
        limit = 2 * self.config.heartbeat_interval
        newly = [m.agent_id for m in sorted(self.managers.values(), key=lambda m: m.agent_id)
                 if m.live and now - m.last_heartbeat >= limit]
        for agent in newly:
            self.mark_unresponsive(agent, now, f"no heartbeat for {limit // 1000} s")
        self.leases.sweep_expired(now)
        return newly

    def mark_unresponsive(self, agent: str, now: int, reason: str) -> bool:
        info = self.managers.get(agent)
        if info is None or not info.live:
            return False
        info.live = False
        self._publish("agent_status", BROADCAST, {
            "agent": agent, "status": "unresponsive", "outcome": "failed", "reason": reason})
        self.recover_tasks(agent, now)
        return True

    def _reissue_target(self, task: TaskStatus, snap: StateSnapshot, exclude: str | None) -> str | None:
        for cand in self.live_managers(task.capability, exclude=exclude):
            role = self.managers[cand].role
            if not isinstance(evaluate(snap.policy, role, task.device_class, task.operation,
                                       task.params), Deny):
                return cand
        return None

    def recover_tasks(self, failed: str, now: int) -> list[tuple[TaskStatus, str]]:
        snap = self.store.snapshot()
        results = []
        record = {"failed": failed, "now": now, "head": snap.head,
                  "live": {m: sorted(self.managers[m].capabilities)
                           for m in self.live_managers()},
                  "roles": {m: self.managers[m].role for m in self.live_managers()},
                  "results": {}}
        for task_id in sorted(snap.open_tasks):
            task = snap.open_tasks[task_id]
            if task.assigned_to != failed:
                continue
            if task.phase == "confirmed":
                action, new = "closed", task
            elif task.phase not in IN_FLIGHT_PHASES:
                action, new = "escalated", task.with_(phase="escalated")
            else:
                new, action = self._requeue(task, snap, now, exclude=failed)
            self._record_recovery(new, action, failed, snap, intent_hint=task.intent_id)
            record["results"][task_id] = action
            results.append((new, action))
        self.recoveries.append(record)
        return results

    def _requeue(self, task: TaskStatus, snap: StateSnapshot, now: int,
                 exclude: str | None) -> tuple[TaskStatus, str]:
        target = self._reissue_target(task, snap, exclude)
        if target is not None:
            return task.with_(assigned_to=target, phase="dispatched", lease_id=None,
                              next_retry_at=None), "reissued"
        attempts = task.attempts + 1
        if attempts > self.config.max_attempts:
            return task.with_(phase="escalated", attempts=attempts, next_retry_at=None), "escalated"
        return task.with_(phase="retrying", attempts=attempts,
                          next_retry_at=now + self.config.backoff(attempts)), "queued"

    def _record_recovery(self, task: TaskStatus, action: str, failed: str | None,
                         snap: StateSnapshot, intent_hint: str) -> None:
        self.tasks[task.task_id] = task
        self._publish("recovery_outcome", BROADCAST, {
            "task": task.to_dict(), "action": action, "failed_agent": failed,
            "reason": {"closed": "confirmed in log", "reissued": f"reissued to {task.assigned_to}",
                       "queued": f"retry at +{(task.next_retry_at or 0) - self.sched.now()} ms",
                       "escalated": "surfaced for operator review"}[action],
        })
        if action == "reissued":
            intent = snap.intent(intent_hint) or self.intents.get(intent_hint)
            self._publish("task_dispatch", inbox(task.assigned_to), {
                "task": task.to_dict(), "intent": intent.to_dict(),
                "reason": f"recovery reissue to {task.assigned_to}",
            }, self.store.head())
        elif action == "queued":
            self._arm_retry(task)

    def _arm_retry(self, task: TaskStatus) -> None:
        old = self._retry_timers.pop(task.task_id, None)
        if old is not None:
            self.sched.cancel(old)
        self._retry_timers[task.task_id] = self.sched.call_at(
            task.next_retry_at, lambda tid=task.task_id: self.retry_task(tid))

    def retry_task(self, task_id: str) -> str | None:
        self._retry_timers.pop(task_id, None)
        if not self.up:
            return None
        snap = self.store.snapshot()
        task = snap.open_tasks.get(task_id)
        if task is None or task.phase != "retrying":
            return None
        new, action = self._requeue(task, snap, self.sched.now(), exclude=None)
        self._record_recovery(new, action, None, snap, intent_hint=task.intent_id)
        return action
