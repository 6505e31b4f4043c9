"""Deterministic scheduler for agent event loops on a virtual or scaled real clock.

Agents expose ``has_pending()`` and ``step()``.  Between timer firings the
scheduler runs every agent to quiescence, one envelope at a time, round robin
in registration order.  Priority agents (the librarian) are drained first so
HEAD reflects everything observed before any other agent reasons about it.
"""
from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Any, Callable

# 2026-01-01T00:00:00Z; virtual runs start here so commit timestamps are stable
EPOCH_MS = 1_767_225_600_000
REAL_CLOCK_SCALE = 60.0  # virtual seconds per wall second


@dataclass(order=True)
class Timer:
    at: int
    seq: int
    fn: Callable[[], Any] = field(compare=False)
    cancelled: bool = field(default=False, compare=False)


class Scheduler:
    def __init__(self, clock: str = "virtual", epoch_ms: int = EPOCH_MS,
                 scale: float = REAL_CLOCK_SCALE, max_steps: int = 1_000_000):
        if clock not in ("virtual", "real"):
            raise ValueError(f"clock must be 'virtual' or 'real', not {clock!r}")
        self.clock = clock
        self.epoch_ms = epoch_ms
        self.scale = scale
        self.max_steps = max_steps
        self._virtual = epoch_ms
        self._wall0 = time.monotonic()
        self._timers: list[Timer] = []
        self._seq = itertools.count()
        self._agents: list[Any] = []
        self._priority: list[Any] = []
        self._rr = 0
        self.hop_ms: list[float] = []

    # -- time ------------------------------------------------------------

    def now(self) -> int:
        if self.clock == "virtual":
            return self._virtual
        return self.epoch_ms + int((time.monotonic() - self._wall0) * 1000 * self.scale)

    def elapsed(self) -> int:
        return self.now() - self.epoch_ms

    def call_at(self, at: int, fn: Callable[[], Any]) -> Timer:
        t = Timer(int(at), next(self._seq), fn)
        heapq.heappush(self._timers, t)
        return t

    def call_later(self, delay_ms: int, fn: Callable[[], Any]) -> Timer:
        return self.call_at(self.now() + delay_ms, fn)

    def cancel(self, t: Timer) -> None:
        t.cancelled = True

    # -- agents ----------------------------------------------------------

    def add_agent(self, agent: Any, priority: bool = False) -> None:
        (self._priority if priority else self._agents).append(agent)

    def _step(self, agent: Any) -> None:
        t0 = time.perf_counter()
        agent.step()
        self.hop_ms.append((time.perf_counter() - t0) * 1000)

    def quiesce(self) -> int:
        steps = 0
        while True:
            steps += 1
            if steps > self.max_steps:
                raise RuntimeError("agents did not quiesce; message storm?")
            busy = next((a for a in self._priority if a.has_pending()), None)
            if busy is not None:
                self._step(busy)
                continue
            n = len(self._agents)
            for k in range(n):
                a = self._agents[(self._rr + k) % n]
                if a.has_pending():
                    self._rr = (self._rr + k + 1) % n
                    self._step(a)
                    break
            else:
                return steps - 1

    def run_until(self, at: int) -> None:
        """Fire every timer due at or before ``at`` (absolute ms), quiescing after each."""
        self.quiesce()
        while self._timers and self._timers[0].at <= at:
            t = heapq.heappop(self._timers)
            if t.cancelled:
                continue
            self._advance(t.at)
            t.fn()
            self.quiesce()
        self._advance(at)
        self.quiesce()

    def _advance(self, at: int) -> None:
        if self.clock == "virtual":
            self._virtual = max(self._virtual, at)
            return
        wait = (at - self.now()) / 1000 / self.scale
        if wait > 0:
            time.sleep(wait)
