"""Hash-chained, single-writer commit log with git-like HEAD semantics.

Commits hold ordered event records; world state (device shadows, policy, tasks,
intents) is never stored, only derived by folding events from genesis.  The
live snapshot at HEAD is cached; historical snapshots are re-folded on demand.

On disk the log is a sequence of ``[u32 big-endian length][canonical commit]``
records next to a ``HEAD`` file holding the hex hash and a newline.
"""
from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .canonical import GENESIS_SENTINEL, canonical_bytes, digest, is_canonical, loads
from .model import DeviceShadow, EventRecord, IntentRecord, TaskStatus
from .policy import PolicyDoc, PolicyError, parse_policy

LOG_NAME = "commits.log"
HEAD_NAME = "HEAD"
_LEN = struct.Struct(">I")
# stands in for the hash of the commit being built while its snapshot is digested
_SELF = "@self"


class StoreError(Exception):
    pass


class NotWriter(StoreError):
    pass


class StaleBase(StoreError):
    pass


class EmptyEvents(StoreError):
    pass


class UnknownCommit(StoreError, KeyError):
    pass


class CorruptStore(StoreError):
    def __init__(self, message: str, bad_hash: str | None = None):
        super().__init__(message)
        self.bad_hash = bad_hash


@dataclass(frozen=True)
class Commit:
    hash: str
    parent: str | None
    author: str
    timestamp: int
    events: tuple[EventRecord, ...]
    snapshot_digest: str

    def content(self) -> dict:
        return {
            "parent": self.parent if self.parent is not None else GENESIS_SENTINEL,
            "author": self.author,
            "timestamp": self.timestamp,
            "events": [e.to_dict() for e in self.events],
            "snapshot_digest": self.snapshot_digest,
        }

    def to_dict(self) -> dict:
        return {**self.content(), "hash": self.hash}

    def encode(self) -> bytes:
        return canonical_bytes(self.to_dict())

    @classmethod
    def decode(cls, raw: bytes) -> "Commit":
        d = loads(raw)
        parent = d["parent"]
        return cls(
            hash=d["hash"],
            parent=None if parent == GENESIS_SENTINEL else parent,
            author=d["author"],
            timestamp=d["timestamp"],
            events=tuple(EventRecord.from_dict(e) for e in d["events"]),
            snapshot_digest=d["snapshot_digest"],
        )


def commit_hash(content: Mapping[str, Any]) -> str:
    return digest(content)


@dataclass(frozen=True)
class StateSnapshot:
    head: str
    shadows: Mapping[str, DeviceShadow] = field(default_factory=dict)
    policy_commit: str = ""
    policy: PolicyDoc = field(default_factory=PolicyDoc)
    open_tasks: Mapping[str, TaskStatus] = field(default_factory=dict)
    active_intents: tuple[IntentRecord, ...] = ()
    leases: Mapping[str, str] = field(default_factory=dict)

    def intent(self, intent_id: str | None) -> IntentRecord | None:
        for i in self.active_intents:
            if i.intent_id == intent_id:
                return i
        return None

    def body(self) -> dict:
        """Everything but ``head``; this is what the commit's snapshot digest covers."""
        return {
            "shadows": {k: v.to_dict() for k, v in sorted(self.shadows.items())},
            "policy_commit": self.policy_commit,
            "policy": {"version": self.policy.version, "text": self.policy.text},
            "open_tasks": {k: v.to_dict() for k, v in sorted(self.open_tasks.items())},
            "active_intents": [i.to_dict() for i in self.active_intents],
            "leases": dict(sorted(self.leases.items())),
        }

    def to_dict(self) -> dict:
        return {"head": self.head, **self.body()}


def _replace_intent(intents: tuple[IntentRecord, ...], new: IntentRecord) -> tuple:
    return tuple(new if i.intent_id == new.intent_id else i for i in intents)


def _release_claim(intents: tuple[IntentRecord, ...], intent_id: str, device: str) -> tuple:
    out = []
    for i in intents:
        if i.intent_id == intent_id:
            i = IntentRecord(i.intent_id, i.origin, i.issued_at, i.description,
                             i.claimed_devices - {device})
        out.append(i)
    return tuple(out)


def apply_events(
    base: StateSnapshot, events: Sequence[EventRecord], commit: str, timestamp: int
) -> StateSnapshot:
    """Fold one commit's events into ``base``; returns a new snapshot with head=commit."""
    shadows = dict(base.shadows)
    tasks = dict(base.open_tasks)
    intents = base.active_intents
    leases = dict(base.leases)
    policy, policy_commit = base.policy, base.policy_commit

    for ev in events:
        data, refs = ev.data, ev.refs
        task_id = refs.get("task_id")
        if ev.kind == "task_dispatch":
            t = TaskStatus.from_dict(data["task"])
            tasks[t.task_id] = t
            intent = IntentRecord.from_dict(data["intent"])
            if not any(i.intent_id == intent.intent_id for i in intents):
                intents = intents + (intent,)
        elif ev.kind == "proposal":
            if task_id in tasks and tasks[task_id].phase in ("dispatched", "retrying"):
                phase = "blocked" if ev.outcome == "rejected" else "proposed"
                tasks[task_id] = tasks[task_id].with_(phase=phase)
        elif ev.kind == "lease_grant":
            leases[refs["lease_id"]] = "pending"
            if task_id in tasks and tasks[task_id].phase != "confirmed":
                tasks[task_id] = tasks[task_id].with_(phase="granted", lease_id=refs["lease_id"])
        elif ev.kind == "lease_reject":
            if task_id in tasks and tasks[task_id].phase != "confirmed":
                stage = data.get("stage")
                if ev.outcome == "escalated":
                    tasks[task_id] = tasks[task_id].with_(phase="escalated")
                elif stage in ("conflict", "policy"):
                    tasks[task_id] = tasks[task_id].with_(phase="blocked")
        elif ev.kind == "exec_result":
            lease_id = refs["lease_id"]
            if ev.outcome == "ok":
                leases[lease_id] = "consumed"
                device = data["device"]
                intent_id = data.get("intent_id")
                shadows[device] = DeviceShadow(
                    device, data["device_class"], dict(data["resulting_state"]),
                    commit, intent_id, timestamp,
                )
                if task_id in tasks:
                    tasks[task_id] = tasks[task_id].with_(phase="confirmed")
                for i in intents:
                    if i.intent_id == intent_id:
                        intents = _replace_intent(intents, IntentRecord(
                            i.intent_id, i.origin, i.issued_at, i.description,
                            i.claimed_devices | {device}))
            elif task_id in tasks and tasks[task_id].phase != "confirmed":
                tasks[task_id] = tasks[task_id].with_(phase="escalated")
        elif ev.kind == "conflict_resolution":
            device = data["device"]
            if data["action"] == "keep":
                intents = _release_claim(intents, refs["incoming_intent"], device)
            elif data["action"] == "supersede":
                intents = _release_claim(intents, refs["standing_intent"], device)
        elif ev.kind == "recovery_outcome":
            t = TaskStatus.from_dict(data["task"])
            tasks[t.task_id] = t
        elif ev.kind == "policy_update":
            try:
                policy = parse_policy(data["text"], version=commit)
            except PolicyError:
                continue
            policy_commit = commit
        # conflict_report and agent_status carry evidence only

    return StateSnapshot(commit, shadows, policy_commit, policy, tasks, intents, leases)


def _rebind(snap: StateSnapshot, old: str, new: str) -> StateSnapshot:
    shadows = {
        k: (DeviceShadow(v.device_id, v.device_class, v.state, new, v.provenance_intent,
                         v.updated_at) if v.provenance_commit == old else v)
        for k, v in snap.shadows.items()
    }
    policy = snap.policy.with_version(new) if snap.policy.version == old else snap.policy
    policy_commit = new if snap.policy_commit == old else snap.policy_commit
    return StateSnapshot(new, shadows, policy_commit, policy, snap.open_tasks,
                         snap.active_intents, snap.leases)


def build_commit(
    parent: Commit | None, parent_snap: StateSnapshot | None, author: str,
    timestamp: int, events: Sequence[EventRecord],
) -> tuple[Commit, StateSnapshot]:
    """Fold ``events`` onto the parent snapshot and seal the commit hash."""
    if parent_snap is None:
        parent_snap = StateSnapshot(_SELF, policy=PolicyDoc(_SELF), policy_commit=_SELF)
    pending = apply_events(parent_snap, events, _SELF, timestamp)
    snap_digest = digest(pending.body())
    c = Commit("", parent.hash if parent else None, author, timestamp, tuple(events), snap_digest)
    h = commit_hash(c.content())
    c = Commit(h, c.parent, author, timestamp, c.events, snap_digest)
    return c, _rebind(pending, _SELF, h)


def event_touches(ev: EventRecord, device: str) -> bool:
    return ev.subject == device


class CommitStore:
    """Append-only commit log.  Only ``writer`` may append."""

    def __init__(self, writer: str = "dewey", path: str | os.PathLike | None = None,
                 genesis_timestamp: int = 0, verify: bool = True):
        self.writer = writer
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._raw: list[bytes] = []
        self._commits: list[Commit] = []
        self._index: dict[str, int] = {}
        self._head_snap: StateSnapshot | None = None
        if self.path is not None and (self.path / LOG_NAME).exists():
            self._load(verify)
        else:
            genesis, snap = build_commit(None, None, writer, genesis_timestamp, [])
            self._push(genesis, snap)

    # -- persistence -----------------------------------------------------

    def _load(self, verify: bool) -> None:
        data = (self.path / LOG_NAME).read_bytes()
        off, snap, prev = 0, None, None
        while off + _LEN.size <= len(data):
            (n,) = _LEN.unpack_from(data, off)
            raw = data[off + _LEN.size: off + _LEN.size + n]
            if len(raw) < n:
                break  # torn trailing record
            try:
                c = Commit.decode(raw)
                _, snap = build_commit(prev, snap, c.author, c.timestamp, c.events)
            except (ValueError, KeyError, TypeError) as exc:
                if off + _LEN.size + n == len(data):
                    break  # garbled tail from an interrupted write
                raise CorruptStore(f"undecodable record at byte {off}") from exc
            self._push(c, _rebind(snap, snap.head, c.hash), raw=raw, persist=False)
            prev = c
            off += _LEN.size + n
        if not self._commits:
            raise StoreError(f"no readable commits in {self.path / LOG_NAME}")
        if off != len(data):
            with open(self.path / LOG_NAME, "r+b") as fh:
                fh.truncate(off)
        if verify:
            bad = self.verify_chain()
            if bad is not None:
                raise CorruptStore(f"commit {bad} does not verify", bad)
        if self.path is not None and os.access(self.path, os.W_OK):
            self._write_head()

    def _write_head(self) -> None:
        if self.path is not None:
            tmp = self.path / (HEAD_NAME + ".tmp")
            tmp.write_text(self._commits[-1].hash + "\n")
            os.replace(tmp, self.path / HEAD_NAME)

    def _push(self, c: Commit, snap: StateSnapshot, raw: bytes | None = None,
              persist: bool = True) -> None:
        raw = raw if raw is not None else c.encode()
        if persist and self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            with open(self.path / LOG_NAME, "ab") as fh:
                fh.write(_LEN.pack(len(raw)) + raw)
                fh.flush()
                os.fsync(fh.fileno())
        self._index[c.hash] = len(self._commits)
        self._commits.append(c)
        self._raw.append(raw)
        self._head_snap = snap
        if persist:
            self._write_head()

    # -- writes ----------------------------------------------------------

    def append_commit(self, author: str, events: Sequence[EventRecord],
                      base: StateSnapshot, timestamp: int) -> Commit:
        if author != self.writer:
            raise NotWriter(f"{author!r} is not the store writer ({self.writer!r})")
        if not events:
            raise EmptyEvents("a commit needs at least one event")
        with self._lock:
            if base.head != self._commits[-1].hash:
                raise StaleBase(f"base {base.head[:12]} is not HEAD {self.head()[:12]}")
            c, snap = build_commit(self._commits[-1], self._head_snap, author, timestamp, events)
            self._push(c, snap)
            return c

    # -- reads -----------------------------------------------------------

    def head(self) -> str:
        return self._commits[-1].hash

    @property
    def genesis(self) -> str:
        return self._commits[0].hash

    def __len__(self) -> int:
        return len(self._commits)

    def __contains__(self, h: object) -> bool:
        return h in self._index

    def commits(self) -> list[Commit]:
        return list(self._commits)

    def commit(self, h: str) -> Commit:
        return self._commits[self.position(h)]

    def position(self, h: str) -> int:
        try:
            return self._index[h]
        except KeyError:
            raise UnknownCommit(h) from None

    def snapshot(self) -> StateSnapshot:
        return self._head_snap

    def snapshot_at(self, h: str) -> StateSnapshot:
        pos = self.position(h)
        if pos == len(self._commits) - 1:
            return self._head_snap
        snap = None
        for c in self._commits[: pos + 1]:
            parent = self._commits[self._index[c.parent]] if c.parent else None
            _, snap = build_commit(parent, snap, c.author, c.timestamp, c.events)
        return snap

    def iter_events(self, since: str | None = None) -> Iterator[tuple[Commit, int, EventRecord]]:
        start = 0 if since is None else self.position(since) + 1
        for c in self._commits[start:]:
            for i, ev in enumerate(c.events):
                yield c, i, ev

    def event_count(self) -> int:
        return sum(len(c.events) for c in self._commits)

    def persisted_msg_ids(self) -> set[str]:
        return {ev.msg_id for c in self._commits for ev in c.events if ev.msg_id}

    def first_touch_after(self, device: str, base: str) -> str | None:
        for c, _, ev in self.iter_events(since=base):
            if event_touches(ev, device):
                return c.hash
        return None

    def touched_since(self, device: str, base: str) -> bool:
        return self.first_touch_after(device, base) is not None

    def timeline_query(self, device: str, since: str | None = None
                       ) -> list[tuple[Commit, EventRecord, IntentRecord | None]]:
        if since is not None:
            self.position(since)
        out = []
        intents: dict[str, IntentRecord] = {}
        for c, _, ev in self.iter_events():
            if ev.kind == "task_dispatch":
                i = IntentRecord.from_dict(ev.data["intent"])
                intents.setdefault(i.intent_id, i)
            if since is not None and self._index[c.hash] <= self._index[since]:
                continue
            if event_touches(ev, device):
                out.append((c, ev, intents.get(ev.data.get("intent_id"))))
        return out

    def verify_chain(self) -> str | None:
        """Return None if every commit re-hashes correctly, else the first bad hash."""
        prev: Commit | None = None
        snap: StateSnapshot | None = None
        for pos, raw in enumerate(self._raw):
            expected = self._commits[pos].hash
            if not is_canonical(raw):
                return expected
            try:
                c = Commit.decode(raw)
            except (ValueError, KeyError, TypeError):
                return expected
            if c.encode() != raw:
                return expected  # e.g. a mangled key the decoder silently ignored
            if c.hash != expected or c.parent != (prev.hash if prev else None):
                return expected
            if commit_hash(c.content()) != c.hash:
                return expected
            try:
                rebuilt, snap = build_commit(prev, snap, c.author, c.timestamp, c.events)
            except (ValueError, KeyError, TypeError):
                return expected
            if rebuilt.snapshot_digest != c.snapshot_digest:
                return expected
            prev = c
        return None


def read_head_file(path: str | os.PathLike) -> str | None:
    p = Path(path) / HEAD_NAME
    return p.read_text().strip() if p.exists() else None


def iter_records(raw: bytes) -> Iterable[bytes]:
    off = 0
    while off + _LEN.size <= len(raw):
        (n,) = _LEN.unpack_from(raw, off)
        yield raw[off + _LEN.size: off + _LEN.size + n]
        off += _LEN.size + n


def frame(record: bytes) -> bytes:
    return _LEN.pack(len(record)) + record
