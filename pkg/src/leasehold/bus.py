"""In-process message bus with the MQTT topology the agents expect.

Topics are per-agent inboxes (``inbox/<agent>``), one ``broadcast`` channel and
the ``audit`` mirror.  Every inbox or broadcast publication is also delivered,
exactly once, to every audit tap.  Abrupt disconnects publish the agent's
registered last will on ``broadcast``.
"""
from __future__ import annotations

import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

from .canonical import canonical_bytes, loads

BROADCAST = "broadcast"
AUDIT = "audit"
DEFAULT_QUEUE_LIMIT = 4096

MESSAGE_KINDS = frozenset(
    {
        "user_intent", "task_dispatch", "proposal", "lease_grant", "lease_reject",
        "exec_request", "exec_result", "conflict_report", "snapshot_request",
        "snapshot_reply", "heartbeat", "will", "rejection",
        # root -> manager go-ahead after the root-side gate, and root bookkeeping
        "exec_ack", "agent_status", "recovery_outcome",
    }
)


def inbox(agent: str) -> str:
    return f"inbox/{agent}"


def inbox_owner(topic: str) -> str | None:
    return topic[len("inbox/"):] if topic.startswith("inbox/") else None


class BusError(Exception):
    pass


class NotConnected(BusError):
    pass


class MalformedEnvelope(BusError, ValueError):
    pass


class BusOverflow(BusError):
    """A subscriber queue stayed full past the publish timeout."""


@dataclass(frozen=True)
class Envelope:
    msg_id: str
    sender: str
    topic: str
    kind: str
    payload: Mapping[str, Any] = field(default_factory=dict)
    base_commit: str | None = None
    lease_id: str | None = None
    sent_at: int = 0

    def validate(self) -> None:
        if self.kind not in MESSAGE_KINDS:
            raise MalformedEnvelope(f"unknown message kind {self.kind!r}")
        if self.topic != BROADCAST and not (inbox_owner(self.topic) or ""):
            raise MalformedEnvelope(f"cannot publish to topic {self.topic!r}")
        if not self.msg_id or not self.sender:
            raise MalformedEnvelope("msg_id and sender are required")
        if self.kind == "exec_request" and (not self.base_commit or not self.lease_id):
            raise MalformedEnvelope("exec_request must carry base_commit and lease_id")
        if self.kind in ("heartbeat", "will") and (self.base_commit or self.lease_id):
            raise MalformedEnvelope(f"{self.kind} carries neither base_commit nor lease_id")

    def to_dict(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "sender": self.sender,
            "topic": self.topic,
            "kind": self.kind,
            "base_commit": self.base_commit,
            "lease_id": self.lease_id,
            "payload": dict(self.payload),
            "sent_at": self.sent_at,
        }

    def encode(self) -> bytes:
        return canonical_bytes(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Envelope":
        return cls(d["msg_id"], d["sender"], d["topic"], d["kind"], dict(d["payload"]),
                   d.get("base_commit"), d.get("lease_id"), d.get("sent_at", 0))

    @classmethod
    def decode(cls, raw: bytes) -> "Envelope":
        return cls.from_dict(loads(raw))


@dataclass(frozen=True)
class WillRegistration:
    agent: str
    will: Envelope


@dataclass(frozen=True)
class Receipt:
    msg_id: str
    seq: int
    delivered: int


class Subscription:
    """Bounded FIFO of envelopes for one consumer."""

    def __init__(self, owner: str, topic: str, limit: int = DEFAULT_QUEUE_LIMIT):
        self.owner = owner
        self.topic = topic
        self.limit = limit
        self._q: deque[Envelope] = deque()
        self._cv = threading.Condition()
        self.closed = False

    def _offer(self, e: Envelope, timeout: float | None) -> None:
        with self._cv:
            if len(self._q) >= self.limit:
                if not self._cv.wait_for(lambda: len(self._q) < self.limit, timeout):
                    raise BusOverflow(f"{self.owner}/{self.topic} queue full")
            self._q.append(e)
            self._cv.notify_all()

    def get(self, timeout: float | None = None) -> Envelope | None:
        with self._cv:
            if not self._cv.wait_for(lambda: self._q, timeout):
                return None
            e = self._q.popleft()
            self._cv.notify_all()
            return e

    def get_nowait(self) -> Envelope | None:
        return self.get(timeout=0)

    def peek(self) -> Envelope | None:
        with self._cv:
            return self._q[0] if self._q else None

    def drain(self) -> list[Envelope]:
        with self._cv:
            out = list(self._q)
            self._q.clear()
            self._cv.notify_all()
            return out

    def __len__(self) -> int:
        return len(self._q)

    def __iter__(self) -> Iterator[Envelope]:
        while (e := self.get_nowait()) is not None:
            yield e


class InProcessBus:
    def __init__(self, queue_limit: int = DEFAULT_QUEUE_LIMIT, publish_timeout: float = 1.0):
        self.queue_limit = queue_limit
        self.publish_timeout = publish_timeout
        self._lock = threading.RLock()
        self._sessions: dict[str, int] = {}
        self._session_counts: Counter[str] = Counter()
        self._subs: dict[str, list[Subscription]] = {}
        self._taps: list[Subscription] = []
        self._wills: dict[str, Envelope] = {}
        self._seq = 0
        self.publish_counts: Counter[str] = Counter()

    # -- connections -----------------------------------------------------

    def connect(self, agent: str) -> int:
        with self._lock:
            if agent not in self._sessions:
                self._session_counts[agent] += 1
                self._sessions[agent] = self._session_counts[agent]
            return self._sessions[agent]

    def is_connected(self, agent: str) -> bool:
        return agent in self._sessions

    def disconnect(self, agent: str, clean: bool = True) -> Envelope | None:
        """Drop ``agent``'s connection.  Returns the will if one was published."""
        with self._lock:
            if agent not in self._sessions:
                return None
            del self._sessions[agent]
            for subs in self._subs.values():
                for s in [s for s in subs if s.owner == agent]:
                    s.closed = True
                    subs.remove(s)
            will = self._wills.pop(agent, None)
            if will is None or clean:
                return None
            self._deliver(will)
            return will

    def _require(self, agent: str) -> None:
        if agent not in self._sessions:
            raise NotConnected(agent)

    # -- pub/sub ---------------------------------------------------------

    def publish(self, e: Envelope) -> Receipt:
        e.validate()
        with self._lock:
            self._require(e.sender)
            if e.kind == "will":
                raise MalformedEnvelope("wills are published by the bus, not by agents")
            return self._deliver(e)

    def _deliver(self, e: Envelope) -> Receipt:
        self._seq += 1
        self.publish_counts[e.topic] += 1
        targets = list(self._subs.get(e.topic, ())) + list(self._taps)
        for s in targets:
            s._offer(e, self.publish_timeout)
        return Receipt(e.msg_id, self._seq, len(targets))

    def subscribe(self, agent: str, topic: str) -> Subscription:
        with self._lock:
            self._require(agent)
            owner = inbox_owner(topic)
            if topic != BROADCAST and owner is None:
                raise ValueError(f"cannot subscribe to {topic!r}; use audit_tap()")
            if owner is not None and owner != agent:
                raise ValueError(f"{agent} may not read {topic}")
            sub = Subscription(agent, topic, self.queue_limit)
            self._subs.setdefault(topic, []).append(sub)
            return sub

    def register_will(self, w: WillRegistration) -> None:
        if w.will.kind != "will":
            raise MalformedEnvelope("will registration needs an envelope of kind 'will'")
        w.will.validate()
        with self._lock:
            self._require(w.agent)
            self._wills[w.agent] = w.will

    def audit_tap(self, observer: str = "audit") -> Subscription:
        with self._lock:
            tap = Subscription(observer, AUDIT, self.queue_limit)
            self._taps.append(tap)
            return tap

    def close_tap(self, tap: Subscription) -> None:
        with self._lock:
            if tap in self._taps:
                self._taps.remove(tap)
                tap.closed = True
