"""Simulated lease-aware device adapters and the device fixture format.

Fixture stanzas are separated by blank lines::

    device light.living_room
    class light
    op set_light brightness tone +power=on
    range brightness 0..100
    range tone {club,warm,cool,neutral}
    range power {on,off}
    initial power=off brightness=0 tone=neutral
    fault none

``op NAME p1 p2 +k=v`` declares an operation taking parameters p1, p2 and
additionally setting k=v.  Fault profiles: ``none``, ``icon_misidentification``
(fails the first attempt only), ``timeout(MS)``, ``intermittent(P)``.
"""
from __future__ import annotations

import random
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

from .lease import AdapterCommand, Lease, LeaseDecision, StalenessCheck, validate_lease
from .model import DeviceShadow
from .policy import Interval, ValueSet

DEFAULT_ADAPTER_TIMEOUT_MS = 5_000
_FAULT = re.compile(r"^(none|icon_misidentification|timeout|intermittent)(?:\(([\d.]+)\))?$")


class DeviceError(Exception):
    pass


class UnknownDevice(DeviceError, KeyError):
    pass


class UnknownOperation(DeviceError):
    pass


class FixtureError(DeviceError, ValueError):
    pass


def parse_value(text: str) -> Any:
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    if re.fullmatch(r"-?\d+\.\d+", text):
        return float(text)
    return text


@dataclass(frozen=True)
class FaultProfile:
    kind: str = "none"
    arg: float | None = None

    @classmethod
    def parse(cls, text: str) -> "FaultProfile":
        m = _FAULT.match(text.strip())
        if not m:
            raise FixtureError(f"unknown fault profile {text!r}")
        kind, arg = m.group(1), m.group(2)
        if kind in ("timeout", "intermittent") and arg is None:
            raise FixtureError(f"fault profile {kind} needs an argument")
        return cls(kind, float(arg) if arg is not None else None)

    def __str__(self) -> str:
        return self.kind if self.arg is None else f"{self.kind}({self.arg:g})"


@dataclass(frozen=True)
class Operation:
    name: str
    params: tuple[str, ...]
    implies: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    device_class: str
    operations: Mapping[str, Operation]
    ranges: Mapping[str, Union[Interval, ValueSet]]
    initial: Mapping[str, Any]
    fault: FaultProfile = FaultProfile()


@dataclass(frozen=True)
class Applied:
    state: Mapping[str, Any]


@dataclass(frozen=True)
class Rejected:
    decision: LeaseDecision


@dataclass(frozen=True)
class Faulted:
    detail: str
    diagnosis: Mapping[str, Any] = field(default_factory=dict)


ApplyResult = Union[Applied, Rejected, Faulted]


class FaultInjector:
    """Seeded fault source.  ``attempts`` may be shared across runs of a trial series."""

    def __init__(self, seed: int = 0, attempts: Counter | None = None,
                 adapter_timeout_ms: int = DEFAULT_ADAPTER_TIMEOUT_MS):
        self._rng = random.Random(seed)
        self.attempts: Counter = attempts if attempts is not None else Counter()
        self.adapter_timeout_ms = adapter_timeout_ms

    def check(self, spec: DeviceSpec, cmd: AdapterCommand, profile: FaultProfile) -> Faulted | None:
        key = spec.device_id
        self.attempts[key] += 1
        if profile.kind == "icon_misidentification" and self.attempts[key] == 1:
            return Faulted(
                "vision grounding misidentified the control app icon; no input sent to device",
                {"fault": "icon_misidentification", "device": spec.device_id,
                 "operation": cmd.operation, "step": "launch_control_app",
                 "expected_icon": "lg_thinq", "tapped_icon": "lg_channels"},
            )
        if profile.kind == "timeout" and profile.arg > self.adapter_timeout_ms:
            return Faulted(f"adapter timed out after {self.adapter_timeout_ms} ms",
                           {"fault": "timeout", "latency_ms": profile.arg})
        if profile.kind == "intermittent" and self._rng.random() < profile.arg:
            return Faulted("intermittent device error", {"fault": "intermittent"})
        return None


class DeviceAdapter:
    def __init__(self, spec: DeviceSpec, injector: FaultInjector | None = None,
                 fault: FaultProfile | None = None):
        self.spec = spec
        self.fault = fault if fault is not None else spec.fault
        self.injector = injector or FaultInjector()
        self.consumed: set[str] = set()
        self._state = dict(spec.initial)
        self._lock = threading.Lock()
        self.log: list[tuple[AdapterCommand, ApplyResult]] = []

    def read(self) -> DeviceShadow:
        return DeviceShadow(self.spec.device_id, self.spec.device_class, dict(self._state))

    def apply(self, cmd: AdapterCommand, lease: Lease | None, now: int, current_head: str,
              staleness_check: StalenessCheck | None = None) -> ApplyResult:
        op = self.spec.operations.get(cmd.operation)
        if op is None:
            raise UnknownOperation(f"{self.spec.device_id} has no operation {cmd.operation!r}")
        with self._lock:
            if cmd.device_class is None:
                cmd = AdapterCommand(cmd.device_id, cmd.operation, cmd.params, cmd.sender,
                                     cmd.lease_id, self.spec.device_class)
            decision = validate_lease(lease, cmd, now, current_head, self.consumed,
                                      staleness_check)
            if not decision.accepted:
                result: ApplyResult = Rejected(decision)
            else:
                result = self._transition(op, cmd)
            self.log.append((cmd, result))
            return result

    def _transition(self, op: Operation, cmd: AdapterCommand) -> ApplyResult:
        for name, value in cmd.params.items():
            if name not in op.params:
                return Faulted(f"{op.name} takes no parameter {name!r}",
                               {"fault": "bad_parameter", "parameter": name})
            rng = self.spec.ranges.get(name)
            if rng is not None and not rng.admits(value):
                return Faulted(f"{name}={value!r} outside device range {rng}",
                               {"fault": "out_of_range", "parameter": name})
        fault = self.injector.check(self.spec, cmd, self.fault)
        if fault is not None:
            return fault
        self._state.update(op.implies)
        self._state.update(cmd.params)
        return Applied(dict(self._state))


class DeviceRegistry:
    def __init__(self, specs: list[DeviceSpec], injector: FaultInjector | None = None,
                 faults: Mapping[str, FaultProfile] | None = None):
        self.injector = injector or FaultInjector()
        faults = faults or {}
        self.adapters = {
            s.device_id: DeviceAdapter(s, self.injector, faults.get(s.device_id))
            for s in specs
        }

    def adapter(self, device_id: str) -> DeviceAdapter:
        try:
            return self.adapters[device_id]
        except KeyError:
            raise UnknownDevice(device_id) from None

    def read(self, device_id: str) -> DeviceShadow:
        return self.adapter(device_id).read()

    def apply(self, cmd: AdapterCommand, lease: Lease | None, now: int, current_head: str,
              staleness_check: StalenessCheck | None = None) -> ApplyResult:
        return self.adapter(cmd.device_id).apply(cmd, lease, now, current_head, staleness_check)

    def of_class(self, device_class: str, within: set[str] | None = None) -> list[str]:
        return sorted(d for d, a in self.adapters.items()
                      if a.spec.device_class == device_class and (within is None or d in within))

    def class_of(self, device_id: str) -> str:
        return self.adapter(device_id).spec.device_class


def _parse_range(text: str, where: str) -> Union[Interval, ValueSet]:
    m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise FixtureError(f"{where}: empty range {text}")
        return Interval(lo, hi)
    m = re.fullmatch(r"\{([^{}]+)\}", text)
    if m:
        return ValueSet(frozenset(v.strip() for v in m.group(1).split(",")))
    raise FixtureError(f"{where}: cannot parse range {text!r}")


def parse_fixture(text: str) -> list[DeviceSpec]:
    specs: list[DeviceSpec] = []
    stanzas = re.split(r"\n\s*\n", text.strip())
    for stanza in stanzas:
        lines = [l.split("#", 1)[0].strip() for l in stanza.splitlines()]
        lines = [l for l in lines if l]
        if not lines:
            continue
        dev_id = dev_class = None
        ops: dict[str, Operation] = {}
        ranges: dict[str, Union[Interval, ValueSet]] = {}
        initial: dict[str, Any] = {}
        fault = FaultProfile()
        for line in lines:
            key, _, rest = line.partition(" ")
            rest = rest.strip()
            where = f"device {dev_id or '?'}"
            if key == "device":
                dev_id = rest
            elif key == "class":
                dev_class = rest
            elif key == "op":
                name, *args = rest.split()
                params = tuple(a for a in args if not a.startswith("+"))
                implies = {}
                for a in args:
                    if a.startswith("+"):
                        k, _, v = a[1:].partition("=")
                        implies[k] = parse_value(v)
                ops[name] = Operation(name, params, implies)
            elif key == "range":
                name, _, spec = rest.partition(" ")
                ranges[name] = _parse_range(spec.strip(), where)
            elif key == "initial":
                for kv in rest.split():
                    k, _, v = kv.partition("=")
                    initial[k] = parse_value(v)
            elif key == "fault":
                fault = FaultProfile.parse(rest)
            else:
                raise FixtureError(f"{where}: unknown key {key!r}")
        if not dev_id or not dev_class or not ops:
            raise FixtureError(f"stanza lacks a device or class line, or has no op: {lines[0]!r}")
        for k, v in initial.items():
            if k in ranges and not ranges[k].admits(v):
                raise FixtureError(f"device {dev_id}: initial {k}={v!r} outside range")
        specs.append(DeviceSpec(dev_id, dev_class, ops, ranges, initial, fault))
    return specs
