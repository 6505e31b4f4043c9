"""Actuation leases: short-lived, single-use authorizations issued by the root.

A lease binds a grantee, a device (or ``class:<name>``) scope, one operation and
its parameter envelope to the state version and policy version it was granted
under.  :func:`validate_lease` is the check adapters and the root run before
anything touches a device.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, MutableSet

from .ids import IdGen
from .policy import ParameterEnvelope, Permit

DEFAULT_TTL_MS = 30_000

# First failing check wins, in this order.
REJECT_CODES = (
    "Missing",
    "Expired",
    "AlreadyConsumed",
    "WrongGrantee",
    "WrongTarget",
    "WrongOperation",
    "OutOfEnvelope",
    "StaleCommit",
)

# (device, base_commit) -> None when fresh, else the invalidating commit hash
StalenessCheck = Callable[[str, str], "str | None"]


class NotRoot(PermissionError):
    pass


@dataclass(frozen=True)
class Grantee:
    role: str
    agent: str

    def to_dict(self) -> dict:
        return {"role": self.role, "agent": self.agent}


@dataclass(frozen=True)
class Lease:
    lease_id: str
    grantee: Grantee
    target: str
    operation: str
    envelope: ParameterEnvelope
    base_commit: str
    policy_commit: str
    expires_at: int
    justification: str
    issued_at: int = 0

    def __post_init__(self) -> None:
        for name in ("lease_id", "target", "operation", "base_commit", "policy_commit",
                     "justification"):
            if not getattr(self, name):
                raise ValueError(f"lease field {name} must be non-empty")

    def covers(self, device_id: str, device_class: str | None) -> bool:
        if self.target.startswith("class:"):
            return device_class is not None and self.target[len("class:"):] == device_class
        return self.target == device_id

    def to_dict(self) -> dict:
        return {
            "lease_id": self.lease_id,
            "grantee": self.grantee.to_dict(),
            "target": self.target,
            "operation": self.operation,
            "envelope": self.envelope.to_dict(),
            "base_commit": self.base_commit,
            "policy_commit": self.policy_commit,
            "expires_at": self.expires_at,
            "justification": self.justification,
            "issued_at": self.issued_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Lease":
        return cls(
            d["lease_id"], Grantee(d["grantee"]["role"], d["grantee"]["agent"]), d["target"],
            d["operation"], ParameterEnvelope.from_dict(d["envelope"]), d["base_commit"],
            d["policy_commit"], d["expires_at"], d["justification"], d.get("issued_at", 0),
        )


@dataclass(frozen=True)
class AdapterCommand:
    device_id: str
    operation: str
    params: Mapping[str, Any]
    sender: str
    lease_id: str | None
    device_class: str | None = None

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "operation": self.operation,
            "params": dict(self.params),
            "sender": self.sender,
            "lease_id": self.lease_id,
            "device_class": self.device_class,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AdapterCommand":
        return cls(d["device_id"], d["operation"], dict(d["params"]), d["sender"],
                   d.get("lease_id"), d.get("device_class"))


@dataclass(frozen=True)
class LeaseDecision:
    code: str | None = None
    detail: str = ""
    invalidating_commit: str | None = None

    @property
    def accepted(self) -> bool:
        return self.code is None

    def __bool__(self) -> bool:
        return self.accepted

    def to_dict(self) -> dict:
        return {"verdict": "accept" if self.accepted else "reject", "code": self.code,
                "detail": self.detail, "invalidating_commit": self.invalidating_commit}


ACCEPT = LeaseDecision()


def validate_lease(
    lease: Lease | None,
    cmd: AdapterCommand,
    now: int,
    current_head: str,
    consumed: MutableSet[str],
    staleness_check: StalenessCheck | None = None,
) -> LeaseDecision:
    """Check ``cmd`` against ``lease``; on accept the lease id joins ``consumed``.

    Without a ``staleness_check`` the lease's base commit must equal
    ``current_head`` exactly.
    """
    if lease is None or (cmd.lease_id is not None and cmd.lease_id != lease.lease_id):
        return LeaseDecision("Missing", "no lease for this command")
    if now >= lease.expires_at:
        return LeaseDecision("Expired", f"lease expired at {lease.expires_at}, now {now}")
    if lease.lease_id in consumed:
        return LeaseDecision("AlreadyConsumed", f"lease {lease.lease_id} already used")
    if cmd.sender != lease.grantee.agent:
        return LeaseDecision("WrongGrantee", f"{cmd.sender} is not {lease.grantee.agent}")
    if not lease.covers(cmd.device_id, cmd.device_class):
        return LeaseDecision("WrongTarget", f"{cmd.device_id} outside {lease.target}")
    if cmd.operation != lease.operation:
        return LeaseDecision("WrongOperation", f"{cmd.operation} is not {lease.operation}")
    why = lease.envelope.violation(cmd.params)
    if why is not None:
        return LeaseDecision("OutOfEnvelope", why)
    if staleness_check is None:
        if lease.base_commit != current_head:
            return LeaseDecision("StaleCommit", "base commit is not HEAD", current_head)
    else:
        invalidating = staleness_check(cmd.device_id, lease.base_commit)
        if invalidating is not None:
            return LeaseDecision(
                "StaleCommit", f"{cmd.device_id} changed in {invalidating[:12]}", invalidating)
    consumed.add(lease.lease_id)
    return ACCEPT


@dataclass
class LeaseTable:
    """The issuer's registry: every lease ever issued, plus the live (unexpired) set."""

    ids: IdGen = field(default_factory=IdGen)
    owner_role: str = "root"
    default_ttl: int = DEFAULT_TTL_MS
    issued: dict[str, Lease] = field(default_factory=dict)
    live: dict[str, Lease] = field(default_factory=dict)
    consumed: set[str] = field(default_factory=set)

    def new_id(self) -> str:
        return self.ids.token("lease")

    def issue_lease(
        self,
        permit: Permit,
        grantee: Grantee,
        target: str,
        operation: str,
        base_commit: str,
        policy_commit: str,
        now: int,
        justification: str,
        ttl: int | None = None,
        caller_role: str = "root",
        lease_id: str | None = None,
    ) -> Lease:
        if caller_role != self.owner_role:
            raise NotRoot(f"only the root may issue leases, not {caller_role}")
        ttl = self.default_ttl if ttl is None else ttl
        lease = Lease(lease_id or self.new_id(), grantee, target, operation, permit.envelope,
                      base_commit, policy_commit, now + ttl, justification, now)
        self.issued[lease.lease_id] = lease
        self.live[lease.lease_id] = lease
        return lease

    def get(self, lease_id: str | None) -> Lease | None:
        return self.issued.get(lease_id) if lease_id else None

    def validate(self, cmd: AdapterCommand, now: int, current_head: str,
                 staleness_check: StalenessCheck | None = None) -> LeaseDecision:
        d = validate_lease(self.get(cmd.lease_id), cmd, now, current_head, self.consumed,
                           staleness_check)
        if d.accepted:
            self.live.pop(cmd.lease_id, None)
        return d

    def sweep_expired(self, now: int) -> list[str]:
        gone = sorted(i for i, l in self.live.items()
                      if now >= l.expires_at and i not in self.consumed)
        for i in gone:
            del self.live[i]
        return gone
