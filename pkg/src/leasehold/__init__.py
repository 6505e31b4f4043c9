"""Coordination kernel for a small fleet of smart-home agents.

A single librarian owns a hash-chained commit log.  Managers propose device
actions against a snapshot of it, and the root grants a short-lived single-use
lease only once its gates pass; adapters verify that lease again.
"""
from __future__ import annotations

from .bus import Envelope, InProcessBus
from .commitstore import Commit, CommitStore, StateSnapshot
from .harness import MetricsReport, bench_lease_validation, load_trace, run_trace
from .lease import Lease, LeaseDecision, validate_lease
from .policy import PolicyDoc, evaluate, parse_policy
from .root import Root, RootConfig

__all__ = [
    "Commit", "CommitStore", "Envelope", "InProcessBus", "Lease", "LeaseDecision",
    "MetricsReport", "PolicyDoc", "Root", "RootConfig", "StateSnapshot",
    "bench_lease_validation", "evaluate", "load_trace", "parse_policy", "run_trace",
    "validate_lease",
]
__version__ = "0.1.0"
