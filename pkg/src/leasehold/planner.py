"""Intent decomposition.  The kernel only sees the :class:`Planner` protocol.

Rule files map a named intent to subtasks, one per line::

    work_from_home light light set_light brightness=55 tone=club -- focused lighting

Fields: intent, required capability, device class, operation, parameters,
then ``--`` and a justification that ends up in the lease.
"""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol

from .devices import parse_value


class PlannerFailure(Exception):
    pass


@dataclass(frozen=True)
class Subtask:
    capability: str
    device_class: str
    operation: str
    params: Mapping[str, Any] = field(default_factory=dict)
    justification: str = ""


class Planner(Protocol):
    def decompose(self, intent: str, snapshot: Any) -> list[Subtask]: ...


class RulePlanner:
    """Pure table lookup; unknown intents decompose to nothing."""

    def __init__(self, rules: Mapping[str, Iterable[Subtask]]):
        self.rules = {k: tuple(v) for k, v in rules.items()}

    def decompose(self, intent: str, snapshot: Any = None) -> list[Subtask]:
        return list(self.rules.get(intent, ()))


class TracePlayer:
    """Replays recorded decompositions in order, per intent."""

    def __init__(self, recorded: Iterable[tuple[str, list[Subtask]]]):
        self._queues: dict[str, deque] = defaultdict(deque)
        for intent, subtasks in recorded:
            self._queues[intent].append(list(subtasks))

    def decompose(self, intent: str, snapshot: Any = None) -> list[Subtask]:
        q = self._queues.get(intent)
        if not q:
            raise PlannerFailure(f"no recorded decomposition left for {intent!r}")
        return q.popleft()


def parse_rules(text: str) -> dict[str, list[Subtask]]:
    rules: dict[str, list[Subtask]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, justification = line.partition("--")
        tokens = head.split()
        if len(tokens) < 4:
            raise ValueError(f"line {lineno}: expected 'intent capability class operation ...'")
        params = {}
        for kv in tokens[4:]:
            k, sep, v = kv.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: bad parameter {kv!r}")
            params[k] = parse_value(v)
        rules.setdefault(tokens[0], []).append(
            Subtask(tokens[1], tokens[2], tokens[3], params, justification.strip()))
    return rules
