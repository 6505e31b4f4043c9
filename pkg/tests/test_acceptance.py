"""End-to-end acceptance checks.  Each test records one PASS/FAIL line."""
from __future__ import annotations

import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

from conftest import verdict
from leasehold.cli import main
from leasehold.commitstore import CommitStore
from leasehold.harness import (bench_lease_validation, _deep_store, oracle_recovery,
                               parse_trace, random_crash_trace, run_trace, run_trials)

LIGHT = "light.living_room"
SEEDS = (1, 2, 3, 4, 5)
# events the combined trace produces; a change here is a change in behaviour
ALL_EVENTS = 35
ALL_EVENTS_LIBRARIAN_CRASH = 36


def test_criterion_1_conflicts():
    t0 = time.perf_counter()
    ok_runs = []
    for seed in SEEDS:
        r = run_trace("scenes/scene2.trace", seed=seed)
        conflicts = r.system.root.conflicts
        shadow = r.system.store.snapshot().shadows[LIGHT].state
        ok_runs.append(
            r.report.conflicts_detected == 1 and r.report.conflicts_resolved == 1
            and len(conflicts) == 1 and conflicts[0][1].action == "keep"
            and conflicts[0][1].winner.origin == "user_explicit"
            and shadow["brightness"] == 55 and shadow["tone"] == "club")
    dt = time.perf_counter() - t0
    ok = all(ok_runs) and dt < 5
    verdict(1, ok, f"{sum(ok_runs)}/5 conflicts detected and kept for the user intent, "
                   f"{dt:.2f} s")
    assert ok


def test_criterion_2_staleness_and_leases():
    t0 = time.perf_counter()
    stale, injections, false_rej = 0, 0, 0
    for seed in SEEDS:
        r = run_trace("scenes/scene3.trace", seed=seed)
        v = r.verdicts
        stale += v.stale_rejected == 1 and v.stale_correct == 1
        injections += all(i["actual"] == i["expect"] for i in r.system.injections) and \
            len(r.system.injections) == 3
        false_rej += v.false_rejections
    dt = time.perf_counter() - t0
    ok = stale == 5 and injections == 5 and false_rej == 0 and dt < 5
    verdict(2, ok, f"{stale}/5 stale replays rejected citing the right commit, "
                   f"{injections}/5 injection sets rejected with the right codes, "
                   f"{false_rej} false rejections, {dt:.2f} s")
    assert ok


def test_criterion_3_zero_event_loss():
    t0 = time.perf_counter()
    a = run_trace("scenes/all.trace", seed=7).report
    b = run_trace("scenes/all_librarian_crash.trace", seed=7).report
    dt = time.perf_counter() - t0
    ok = (a.events_persisted == a.events_produced == ALL_EVENTS
          and b.events_persisted == b.events_produced == ALL_EVENTS_LIBRARIAN_CRASH and dt < 10)
    verdict(3, ok, f"{a.events_persisted}/{a.events_produced} persisted, "
                   f"{b.events_persisted}/{b.events_produced} with a librarian crash, {dt:.2f} s")
    assert ok


def test_criterion_4_lease_overhead():
    t0 = time.perf_counter()
    shallow = bench_lease_validation(100_000, store=_deep_store(10))
    deep = bench_lease_validation(100_000, store=_deep_store(10_000))
    dt = time.perf_counter() - t0
    ratio = deep.p95 / shallow.p95
    ok = shallow.p95 <= 100 and deep.p95 <= 100 and 0.8 <= ratio <= 1.2 and dt < 30
    verdict(4, ok, f"p95 {shallow.p95:.2f} us at depth 10, {deep.p95:.2f} us at depth 10^4 "
                   f"(ratio {ratio:.2f}), {dt:.2f} s")
    assert ok


def _complete(r) -> bool:
    return r.report.tasks_completed == r.report.tasks_total


def test_criterion_5_scene1_fault_and_overhead():
    faulty = run_trials("scenes/scene1.trace", SEEDS, faults={"tv.living_room":
                                                              "icon_misidentification"})
    clean = run_trials("scenes/scene1.trace", SEEDS)
    failed = [e for r in faulty for e in r.system.audit.seen
              if e.kind == "exec_result" and e.payload["outcome"] != "ok"]
    diagnosed = bool(failed) and all(
        {"expected_icon", "tapped_icon"} <= set(e.payload.get("diagnosis") or {}) for e in failed)
    logged = all(any(ev.msg_id == e.msg_id for r in faulty for _, _, ev in
                     r.system.store.iter_events()) for e in failed)
    real = run_trace("scenes/scene1.trace", seed=1, clock="real").report
    n_faulty = sum(map(_complete, faulty))
    n_clean = sum(map(_complete, clean))
    ok = (n_faulty == 4 and n_clean == 5 and diagnosed and logged
          and real.per_hop_overhead_p95 < 50)
    verdict(5, ok, f"{n_faulty}/5 with the fault profile (failure diagnosed: {diagnosed}), "
                   f"{n_clean}/5 without, real-clock hop p95 {real.per_hop_overhead_p95:.2f} ms")
    assert ok


def test_criterion_6_recovery_oracle():
    t0 = time.perf_counter()
    checked, mismatches = 0, []
    tally: Counter = Counter()
    for seed in range(200):
        r = run_trace(parse_trace(random_crash_trace(seed), f"crash-{seed}"), seed=seed)
        s = r.system
        for rec in s.root.recoveries:
            want = oracle_recovery(s.store, rec["head"], rec["failed"], rec["now"], rec["live"],
                                   rec["roles"], s.root.config)
            checked += 1
            tally.update(rec["results"].values())
            if want != rec["results"]:
                mismatches.append((seed, rec["results"], want))
    dt = time.perf_counter() - t0
    ok = not mismatches and checked > 0 and len(tally) == 4 and dt < 60
    verdict(6, ok, f"200 traces, {checked} recoveries, {len(mismatches)} mismatches, "
                   f"classes {dict(sorted(tally.items()))}, {dt:.2f} s")
    assert ok, mismatches[:3]


PROPERTIES = {
    "lease soundness": "test_lease.py::test_single_mutation_never_accepts",
    "single consumption": "test_lease.py::test_single_consumption",
    "fold equivalence": "test_commitstore.py::test_fold_equivalence",
    "corruption detection": "test_commitstore.py::test_any_single_byte_corruption_is_detected",
    "restart equivalence": "test_manager.py::test_restart_between_envelopes_changes_nothing",
    "deny by default": "test_policy.py::test_unnamed_triples_are_denied",
}


def _max_examples(node: str) -> int:
    mod_name, fn = node.split("::")
    mod = __import__(mod_name[:-3])
    return getattr(mod, fn)._hypothesis_internal_use_settings.max_examples


def test_criterion_7_property_suites():
    here = Path(__file__).parent
    sizes = {name: _max_examples(node) for name, node in PROPERTIES.items()}
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(here / n) for n in PROPERTIES.values()]],
                          capture_output=True, text=True, cwd=here.parent)
    ok = proc.returncode == 0 and min(sizes.values()) >= 1000
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    verdict(7, ok, f"{len(PROPERTIES)} suites, min {min(sizes.values())} cases: {summary}")
    assert ok, proc.stdout[-2000:]


def test_criterion_8_determinism(tmp_path):
    heads = []
    for run in ("a", "b"):
        store = tmp_path / run
        assert main(["--store", str(store), "replay", "scenes/all.trace", "--seed", "7"]) == 0
        heads.append(CommitStore("dewey", store).head())
    ok = heads[0] == heads[1]
    verdict(8, ok, f"HEAD {heads[0][:16]} both times" if ok else f"HEADs differ: {heads}")
    assert ok
