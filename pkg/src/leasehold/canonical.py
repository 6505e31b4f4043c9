"""Canonical serialization shared by the commit store and the bus wire format.

Sorted keys, no insignificant whitespace, UTF-8, integers in decimal.  The same
bytes come out on every platform, so digests over them are stable.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any

GENESIS_SENTINEL = "0" * 64


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def loads(raw: bytes) -> Any:
    return json.loads(raw.decode("utf-8"))


def digest(obj: Any) -> str:
    """Lowercase hex SHA-256 of the canonical form of ``obj``."""
    return hashlib.sha256(canonical_bytes(obj)).hexdigest()


def is_canonical(raw: bytes) -> bool:
    try:
        return canonical_bytes(loads(raw)) == raw
    except (UnicodeDecodeError, ValueError):
        return False
