"""Crash a manager mid-task and watch the root classify what it left behind.

Run with ``python3 demos/recovery.py``.
"""
from __future__ import annotations

from leasehold.harness import oracle_recovery, parse_trace, run_trace

SPARE = ("manager=jeeves:home_assistant:light:light.living_room\n"
         "manager=wooster:home_assistant:light:light.living_room\n")
ALONE = "manager=jeeves:home_assistant:light:light.living_room\n"
BODY = ("at=500 action=crash_agent agent=jeeves after_msgs=1\n"
        "at=1000 action=fire_schedule intent=evening_wind_down\n"
        "at=20000 action=advance\n")


def show(title: str, managers: str) -> None:
    print(title)
    r = run_trace(parse_trace(managers + BODY, "recovery"))
    s = r.system
    for e in s.audit.seen:
        if e.kind == "recovery_outcome":
            t = e.payload["task"]
            print(f"  {t['task_id']}: {e.payload['action']:<9} ({e.payload['reason']})")
    for rec in s.root.recoveries:
        want = oracle_recovery(s.store, rec["head"], rec["failed"], rec["now"], rec["live"],
                               rec["roles"], s.root.config)
        print(f"  a log-only rescan agrees: {want == rec['results']}")
    light = s.store.snapshot().shadows.get("light.living_room")
    print(f"  light now: {dict(light.state) if light else 'untouched'}\n")


if __name__ == "__main__":
    show("A spare light manager is on hand, so the task is reissued:", SPARE)
    show("Nobody else can drive the light, so the task waits with growing backoff:", ALONE)
