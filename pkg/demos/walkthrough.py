"""Walk through the three household scenes and narrate what the log records.

Run with ``python3 demos/walkthrough.py``.  Everything happens on a virtual
clock, so the output is identical on every run with the same seed.
"""
from __future__ import annotations

import sys

from leasehold.harness import run_trace

LIGHT = "light.living_room"


def timeline(store, device: str) -> None:
    for c, ev, intent in store.timeline_query(device):
        who = f"{intent.intent_id} ({intent.origin})" if intent else "no intent"
        print(f"    {c.hash[:10]}  {ev.kind:<12} {ev.outcome:<8} {who}: {ev.detail}")


def scene1(seed: int) -> None:
    print("Scene 1. The user says they are working from home today.")
    r = run_trace("scenes/scene1.trace", seed=seed)
    snap = r.system.store.snapshot()
    for dev in (LIGHT, "speaker.living_room", "tv.living_room"):
        print(f"  {dev:<20} {dict(snap.shadows[dev].state)}")
    print(f"  {r.report.tasks_completed}/{r.report.tasks_total} tasks confirmed, "
          f"each under a single-use lease.\n")


def scene2(seed: int) -> None:
    print("Scene 2. At dusk the evening schedule wants the lights dim and warm.")
    r = run_trace("scenes/scene2.trace", seed=seed)
    for report, res in r.system.root.conflicts:
        print(f"  conflict on {report.device}: {report.standing.origin} intent holds it, "
              f"{report.incoming.origin} intent wants {dict(report.incoming_params)}")
        print(f"  resolution: {res.action}. {res.reasoning}")
    print("  Actuations of the light, straight from the log (the refused one never ran):")
    timeline(r.system.store, LIGHT)
    print()


def scene3(seed: int) -> None:
    print("Scene 3. The home assistant crashes and, once back, replays an old command.")
    r = run_trace("scenes/scene3.trace", seed=seed)
    for rej in r.system.root.rejections:
        if rej["code"] == "StaleCommit":
            bad = rej["evidence"].get("invalidating_commit") or "?"
            print(f"  replay refused: StaleCommit, the light changed in {bad[:10]} after "
                  f"the command's base {str(rej['base_commit'])[:10]}")
    for inj in r.system.injections:
        print(f"  forged command, lease={inj['lease']}: {inj['actual']}")
    print(f"  false rejections: {r.verdicts.false_rejections}; "
          f"events persisted {r.report.events_persisted}/{r.report.events_produced}\n")


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
    scene1(seed)
    scene2(seed)
    scene3(seed)
