"""Record types shared across the kernel: events, intents, tasks, device shadows."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping

EVENT_KINDS = frozenset(
    {
        "task_dispatch",
        "proposal",
        "lease_grant",
        "lease_reject",
        "exec_result",
        "conflict_report",
        "conflict_resolution",
        "recovery_outcome",
        "policy_update",
        "agent_status",
    }
)
OUTCOMES = frozenset({"ok", "rejected", "failed", "escalated"})

# Arbitration precedence, highest first.
ORIGIN_RANK = {"user_explicit": 3, "scheduled": 2, "system_default": 1}

TASK_PHASES = frozenset(
    {"dispatched", "proposed", "granted", "confirmed", "blocked", "retrying", "escalated"}
)
IN_FLIGHT_PHASES = frozenset({"dispatched", "proposed", "granted", "retrying"})

_REQUIRED_REFS = {
    "lease_grant": ("lease_id",),
    "lease_reject": ("lease_id",),
    "exec_result": ("task_id", "lease_id"),
    "conflict_resolution": ("standing_intent", "incoming_intent"),
}


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    kind: str
    sender: str
    subject: str
    outcome: str = "ok"
    detail: str = ""
    refs: Mapping[str, str] = field(default_factory=dict)
    data: Mapping[str, Any] = field(default_factory=dict)
    # id of the envelope this record was distilled from; consumers dedupe on it
    msg_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise RecordError(f"unknown event kind {self.kind!r}")
        if self.outcome not in OUTCOMES:
            raise RecordError(f"unknown outcome {self.outcome!r}")
        for ref in _REQUIRED_REFS.get(self.kind, ()):
            if not self.refs.get(ref):
                raise RecordError(f"{self.kind} event requires ref {ref!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sender": self.sender,
            "subject": self.subject,
            "outcome": self.outcome,
            "detail": self.detail,
            "refs": dict(self.refs),
            "data": dict(self.data),
            "msg_id": self.msg_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EventRecord":
        return cls(
            kind=d["kind"],
            sender=d["sender"],
            subject=d["subject"],
            outcome=d["outcome"],
            detail=d["detail"],
            refs=dict(d["refs"]),
            data=dict(d["data"]),
            msg_id=d.get("msg_id"),
        )


@dataclass(frozen=True)
class IntentRecord:
    intent_id: str
    origin: str
    issued_at: int
    description: str = ""
    claimed_devices: frozenset = frozenset()

    def __post_init__(self) -> None:
        if self.origin not in ORIGIN_RANK:
            raise RecordError(f"unknown intent origin {self.origin!r}")

    @property
    def rank(self) -> int:
        return ORIGIN_RANK[self.origin]

    def to_dict(self) -> dict:
        return {
            "intent_id": self.intent_id,
            "origin": self.origin,
            "issued_at": self.issued_at,
            "description": self.description,
            "claimed_devices": sorted(self.claimed_devices),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "IntentRecord":
        return cls(
            d["intent_id"], d["origin"], d["issued_at"], d.get("description", ""),
            frozenset(d.get("claimed_devices", ())),
        )


@dataclass(frozen=True)
class TaskStatus:
    task_id: str
    intent_id: str
    capability: str
    device_class: str
    operation: str
    params: Mapping[str, Any] = field(default_factory=dict)
    assigned_to: str | None = None
    phase: str = "dispatched"
    lease_id: str | None = None
    attempts: int = 0
    next_retry_at: int | None = None
    justification: str = ""

    def __post_init__(self) -> None:
        if self.phase not in TASK_PHASES:
            raise RecordError(f"unknown task phase {self.phase!r}")
        if self.phase == "retrying" and (self.next_retry_at is None or self.attempts < 1):
            raise RecordError("retrying task needs next_retry_at and attempts >= 1")

    def with_(self, **changes: Any) -> "TaskStatus":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "intent_id": self.intent_id,
            "capability": self.capability,
            "device_class": self.device_class,
            "operation": self.operation,
            "params": dict(self.params),
            "assigned_to": self.assigned_to,
            "phase": self.phase,
            "lease_id": self.lease_id,
            "attempts": self.attempts,
            "next_retry_at": self.next_retry_at,
            "justification": self.justification,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskStatus":
        return cls(**{**d, "params": dict(d["params"])})


@dataclass(frozen=True)
class DeviceShadow:
    device_id: str
    device_class: str
    state: Mapping[str, Any]
    provenance_commit: str | None = None
    provenance_intent: str | None = None
    updated_at: int = 0

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "device_class": self.device_class,
            "state": dict(self.state),
            "provenance_commit": self.provenance_commit,
            "provenance_intent": self.provenance_intent,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DeviceShadow":
        return cls(**{**d, "state": dict(d["state"])})
