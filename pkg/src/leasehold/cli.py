"""``leasehold``: replay traces and inspect a commit store from the shell."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .commitstore import HEAD_NAME, LOG_NAME, CommitStore, StoreError, read_head_file
from .harness import (AssertFailed, TraceParseError, _deep_store, bench_lease_validation,
                      load_trace, run_trace)
from .policy import PolicyError, parse_policy

DEFAULT_STORE = ".leasehold"
JOURNAL_NAME = "journal.log"


def _open_store(path: str, verify: bool = True) -> CommitStore:
    if not (Path(path) / LOG_NAME).exists():
        raise StoreError(f"no commit store at {path}")
    return CommitStore("dewey", path, verify=verify)


def cmd_replay(a: argparse.Namespace) -> int:
    trace = load_trace(a.trace)
    store_dir = Path(a.store)
    for name in (LOG_NAME, HEAD_NAME, JOURNAL_NAME):
        (store_dir / name).unlink(missing_ok=True)  # each replay starts from genesis
    faults = dict(f.split(":", 1) for f in a.fault)
    r = run_trace(trace, a.seed, "real" if a.real_clock else "virtual", store_dir, faults)
    if a.json:
        print(r.report.canonical().decode())
    else:
        print(r.report.to_text())
    if a.golden:
        golden = json.loads(Path(a.golden).read_text())
        got = json.loads(r.report.canonical())
        diff = {k: (golden.get(k), got.get(k)) for k in golden.keys() | got.keys()
                if golden.get(k) != got.get(k)}
        if diff:
            for k, (want, have) in sorted(diff.items()):
                print(f"golden mismatch {k}: expected {want!r}, got {have!r}", file=sys.stderr)
            return 1
    return 0


def cmd_log(a: argparse.Namespace) -> int:
    store = _open_store(a.store)
    if a.device:
        for c, ev, intent in store.timeline_query(a.device, a.since):
            who = f"{intent.intent_id}({intent.origin})" if intent else "-"
            print(f"{c.hash[:12]} {c.timestamp} {ev.kind:<13} {ev.outcome:<9} {ev.sender:<8} "
                  f"{who} {ev.detail}")
        return 0
    for c, _, ev in store.iter_events(a.since):
        print(f"{c.hash[:12]} {c.timestamp} {ev.kind:<18} {ev.outcome:<9} {ev.sender:<8} "
              f"{ev.subject} {ev.detail}")
    return 0


def cmd_show(a: argparse.Namespace) -> int:
    store = _open_store(a.store)
    matches = [c for c in store.commits() if c.hash.startswith(a.hash)]
    if len(matches) != 1:
        print(f"{'no' if not matches else 'ambiguous'} commit {a.hash}", file=sys.stderr)
        return 1
    c = matches[0]
    out = {"commit": c.to_dict(), "snapshot": store.snapshot_at(c.hash).to_dict()}
    print(json.dumps(out, indent=2, sort_keys=True, ensure_ascii=False))
    return 0


def cmd_verify(a: argparse.Namespace) -> int:
    store = _open_store(a.store, verify=False)
    bad = store.verify_chain()
    if bad is not None:
        print(f"corrupt commit {bad}", file=sys.stderr)
        return 1
    head = read_head_file(a.store)
    if head is not None and head != store.head():
        print(f"HEAD file names {head} but the log ends at {store.head()}", file=sys.stderr)
        return 1
    print(f"ok: {len(store)} commits, HEAD {store.head()}")
    return 0


def cmd_bench(a: argparse.Namespace) -> int:
    for depth in a.depth:
        store = _deep_store(depth)
        for full in (False, True):
            print(bench_lease_validation(a.n, full=full, store=store).to_text())
    return 0


def cmd_policy_check(a: argparse.Namespace) -> int:
    try:
        doc = parse_policy(Path(a.file).read_text())
    except PolicyError as exc:
        print(f"{a.file}: {exc}", file=sys.stderr)
        return 1
    print(f"ok: {len(doc.rules)} rules")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leasehold", description=__doc__)
    p.add_argument("--store", default=DEFAULT_STORE, help="commit store directory")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("replay", help="replay a trace and print its metrics")
    r.add_argument("trace")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--real-clock", action="store_true")
    r.add_argument("--fault", action="append", default=[], metavar="DEVICE:PROFILE")
    r.add_argument("--json", action="store_true", help="print the canonical report")
    r.add_argument("--golden", help="fail unless the canonical report matches this file")
    r.set_defaults(fn=cmd_replay)

    lg = sub.add_parser("log", help="list events, or one device's timeline")
    lg.add_argument("--device")
    lg.add_argument("--since")
    lg.set_defaults(fn=cmd_log)

    s = sub.add_parser("show", help="print a commit and its snapshot")
    s.add_argument("hash")
    s.set_defaults(fn=cmd_show)

    sub.add_parser("verify", help="re-hash the whole chain").set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="lease validation latency")
    b.add_argument("--n", type=int, default=100_000)
    b.add_argument("--depth", type=int, action="append")
    b.set_defaults(fn=cmd_bench)

    pol = sub.add_parser("policy", help="policy file tools")
    polsub = pol.add_subparsers(dest="policy_command", required=True)
    chk = polsub.add_parser("check", help="parse and validate a policy file")
    chk.add_argument("file")
    chk.set_defaults(fn=cmd_policy_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    a = build_parser().parse_args(argv)
    if getattr(a, "depth", None) is None and a.command == "bench":
        a.depth = [10, 10_000]
    try:
        return a.fn(a)
    except (StoreError, TraceParseError, AssertFailed, OSError, ValueError) as exc:
        print(f"leasehold: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
