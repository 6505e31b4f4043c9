"""Versioned role policy: which manager role may run which operation, within what bounds.

File format, one rule per line, ``#`` starts a comment::

    home_assistant light set_light brightness=0..60% tone={club,warm,cool,neutral}
    home_assistant speaker set_volume volume=0..30% *

``*`` declares the envelope open: parameters without a constraint are allowed.
A rule with no constraints at all places no bounds on parameters.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

_INTERVAL = re.compile(r"^(-?\d+(?:\.\d+)?)\.\.(-?\d+(?:\.\d+)?)([^\s{}=]*)$")
_VALUESET = re.compile(r"^\{([^{}]*)\}$")
_NAME = re.compile(r"^[A-Za-z_][\w.\-/]*$")


class PolicyError(ValueError):
    def __init__(self, message: str, line: int | None = None, rule: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}" + (f" [{rule}]" if rule else ""))
        self.line = line
        self.rule = rule


class ParseError(PolicyError):
    pass


class DuplicateRule(PolicyError):
    pass


class UnsatisfiableEnvelope(PolicyError):
    pass


def _num(text: str) -> int | float:
    return float(text) if "." in text else int(text)


@dataclass(frozen=True)
class Interval:
    lo: int | float
    hi: int | float
    unit: str = ""

    def admits(self, value: Any) -> bool:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {"min": self.lo, "max": self.hi, "unit": self.unit}

    def __str__(self) -> str:
        return f"{self.lo}..{self.hi}{self.unit}"


@dataclass(frozen=True)
class ValueSet:
    values: frozenset

    def admits(self, value: Any) -> bool:
        return isinstance(value, str) and value in self.values

    def to_dict(self) -> dict:
        return {"one_of": sorted(self.values)}

    def __str__(self) -> str:
        return "{" + ",".join(sorted(self.values)) + "}"


Constraint = Union[Interval, ValueSet]


@dataclass(frozen=True)
class ParameterEnvelope:
    constraints: Mapping[str, Constraint] = field(default_factory=dict)
    open: bool = False

    def violation(self, params: Mapping[str, Any]) -> str | None:
        """Return why ``params`` falls outside the envelope, or None if inside."""
        for name in sorted(params):
            c = self.constraints.get(name)
            if c is None:
                if not self.open:
                    return f"parameter {name!r} is not covered by the envelope"
                continue
            if not c.admits(params[name]):
                return f"{name}={params[name]!r} outside {c}"
        return None

    def contains(self, params: Mapping[str, Any]) -> bool:
        return self.violation(params) is None

    def to_dict(self) -> dict:
        return {
            "constraints": {k: v.to_dict() for k, v in sorted(self.constraints.items())},
            "open": self.open,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ParameterEnvelope":
        cons: dict[str, Constraint] = {}
        for name, c in d["constraints"].items():
            if "one_of" in c:
                cons[name] = ValueSet(frozenset(c["one_of"]))
            else:
                cons[name] = Interval(c["min"], c["max"], c.get("unit", ""))
        return cls(cons, bool(d["open"]))


OPEN_ENVELOPE = ParameterEnvelope({}, open=True)


@dataclass(frozen=True)
class PolicyRule:
    role: str
    device_class: str
    operation: str
    bounds: ParameterEnvelope | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.role, self.device_class, self.operation)


@dataclass(frozen=True)
class PolicyDoc:
    version: str | None = None
    rules: tuple[PolicyRule, ...] = ()
    text: str = ""

    def __post_init__(self) -> None:
        seen = set()
        for r in self.rules:
            if r.key in seen:
                raise DuplicateRule("duplicate rule", rule=" ".join(r.key))
            seen.add(r.key)

    def with_version(self, version: str) -> "PolicyDoc":
        return PolicyDoc(version, self.rules, self.text)

    def lookup(self, role: str, device_class: str, operation: str) -> PolicyRule | None:
        for r in self.rules:
            if r.key == (role, device_class, operation):
                return r
        return None


@dataclass(frozen=True)
class Permit:
    envelope: ParameterEnvelope
    rule: PolicyRule

    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class Deny:
    reason: str
    detail: str = ""

    def __bool__(self) -> bool:
        return False


def _parse_constraint(token: str, lineno: int, rule: str) -> tuple[str, Constraint]:
    name, sep, spec = token.partition("=")
    if not sep or not _NAME.match(name):
        raise ParseError(f"bad parameter bound {token!r}", lineno, rule)
    m = _INTERVAL.match(spec)
    if m:
        lo, hi = _num(m.group(1)), _num(m.group(2))
        if lo > hi:
            raise UnsatisfiableEnvelope(f"{name}: min {lo} > max {hi}", lineno, rule)
        return name, Interval(lo, hi, m.group(3))
    m = _VALUESET.match(spec)
    if m:
        values = frozenset(v.strip() for v in m.group(1).split(",") if v.strip())
        if not values:
            raise UnsatisfiableEnvelope(f"{name}: empty value set", lineno, rule)
        return name, ValueSet(values)
    raise ParseError(f"cannot parse bound {spec!r} for {name}", lineno, rule)


def parse_policy(text: str, version: str | None = None) -> PolicyDoc:
    rules: list[PolicyRule] = []
    seen: dict[tuple[str, str, str], int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        rule_name = " ".join(tokens[:3])
        if len(tokens) < 3:
            raise ParseError("expected 'role device_class operation [bounds...]'", lineno, line)
        for t in tokens[:3]:
            if not _NAME.match(t):
                raise ParseError(f"bad identifier {t!r}", lineno, rule_name)
        constraints: dict[str, Constraint] = {}
        is_open = False
        for token in tokens[3:]:
            if token == "*":
                is_open = True
                continue
            name, c = _parse_constraint(token, lineno, rule_name)
            if name in constraints:
                raise ParseError(f"parameter {name!r} bounded twice", lineno, rule_name)
            constraints[name] = c
        bounds = ParameterEnvelope(constraints, is_open) if constraints else None
        rule = PolicyRule(tokens[0], tokens[1], tokens[2], bounds)
        if rule.key in seen:
            raise DuplicateRule(f"same triple already defined on line {seen[rule.key]}",
                                lineno, rule_name)
        seen[rule.key] = lineno
        rules.append(rule)
    return PolicyDoc(version, tuple(rules), text)


def evaluate(
    p: PolicyDoc, role: str, device_class: str, operation: str, params: Mapping[str, Any]
) -> Permit | Deny:
    rule = p.lookup(role, device_class, operation)
    if rule is None:
        return Deny("NoMatchingRule", f"no rule for {role} {device_class} {operation}")
    if rule.bounds is None:
        return Permit(OPEN_ENVELOPE, rule)
    why = rule.bounds.violation(params)
    if why is not None:
        return Deny("OutOfBounds", why)
    return Permit(rule.bounds, rule)
