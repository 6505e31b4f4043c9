"""Seeded id generation.  All randomness in a replay flows through here."""
from __future__ import annotations

import itertools
import random


class IdGen:
    def __init__(self, seed: int = 0):
        self._rng = random.Random(seed)
        self._counters: dict[str, itertools.count] = {}

    def token(self, prefix: str) -> str:
        return f"{prefix}-{self._rng.getrandbits(48):012x}"

    def serial(self, prefix: str) -> str:
        n = next(self._counters.setdefault(prefix, itertools.count(1)))
        return f"{prefix}-{n:04d}"

    def random(self) -> float:
        return self._rng.random()
