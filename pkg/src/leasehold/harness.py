"""Deterministic scene replay, metrics, independent oracles, and the lease benchmark."""
from __future__ import annotations

import gc
import random
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .bus import BROADCAST, Envelope, InProcessBus, inbox
from .canonical import canonical_bytes
from .commitstore import CommitStore, StateSnapshot
from .devices import (DeviceRegistry, FaultInjector, FaultProfile, FixtureError, parse_fixture,
                      parse_value)
from .ids import IdGen
from .lease import AdapterCommand, Grantee, Lease, LeaseTable, validate_lease
from .librarian import Journal, Librarian, observe
from .manager import Manager, ManagerProfile
from .model import EventRecord, IN_FLIGHT_PHASES, TaskStatus
from .planner import RulePlanner, parse_rules
from .policy import OPEN_ENVELOPE, Deny, Permit, evaluate, parse_policy
from .root import Root, RootConfig, verify_freshness
from .sim import Scheduler

ACTIONS = frozenset({
    "inject_intent", "fire_schedule", "crash_agent", "restart_agent", "drop_connection",
    "inject_exec", "assert", "advance",
})
HEADER_KEYS = frozenset({"name", "fixture", "policy", "rules", "manager", "fault", "include"})
SETTLE_MS = 1_000

DEFAULT_MANAGERS = (
    ("jeeves", "home_assistant", ("light", "speaker", "camera"),
     ("light.living_room", "speaker.living_room", "camera.front_door")),
    ("darcy", "mobile_app", ("ui_automation",), ("tv.living_room",)),
)


class TraceParseError(ValueError):
    pass


class AssertFailed(AssertionError):
    def __init__(self, step: "Step", expected: Any, actual: Any):
        super().__init__(f"line {step.line}: expected {expected!r}, got {actual!r}")
        self.step, self.expected, self.actual = step, expected, actual


@dataclass(frozen=True)
class Step:
    at: int
    action: str
    args: Mapping[str, str]
    line: int = 0


@dataclass
class Trace:
    name: str
    fixture: str = "demo.devices"
    policy: str = "demo.policy"
    rules: str = "demo.rules"
    steps: list[Step] = field(default_factory=list)
    managers: list[ManagerProfile] = field(default_factory=list)
    faults: dict[str, str] = field(default_factory=dict)
    base_dir: Path | None = None


def _data_text(ref: str, base_dir: Path | None) -> str:
    if base_dir is not None and (base_dir / ref).exists():
        return (base_dir / ref).read_text()
    p = Path(ref)
    if p.exists():
        return p.read_text()
    node = resources.files("leasehold") / "data"
    for part in Path(ref).parts:
        node = node / part
    if not node.is_file():
        raise TraceParseError(f"cannot find {ref!r}")
    return node.read_text()


def _kv(tokens: Iterable[str], lineno: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        k, eq, v = tok.partition("=")
        if not eq or not k:
            raise TraceParseError(f"line {lineno}: expected key=value, got {tok!r}")
        out[k] = v
    return out


def parse_manager(spec: str) -> ManagerProfile:
    try:
        agent, role, caps, devs = spec.split(":")
    except ValueError:
        raise TraceParseError(f"manager spec must be id:role:caps:devices, got {spec!r}") from None
    return ManagerProfile(agent, role, frozenset(filter(None, caps.split(","))),
                          frozenset(filter(None, devs.split(","))))


def parse_trace(text: str, name: str = "trace", base_dir: Path | None = None,
                _seen: frozenset = frozenset()) -> Trace:
    t = Trace(name, base_dir=base_dir)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kv = _kv(line.split(), lineno)
        if "at" not in kv:
            for k, v in kv.items():
                if k not in HEADER_KEYS:
                    raise TraceParseError(f"line {lineno}: unknown header {k!r}")
                if k == "manager":
                    t.managers.append(parse_manager(v))
                elif k == "fault":
                    dev, _, prof = v.partition(":")
                    try:
                        FaultProfile.parse(prof)
                    except FixtureError as exc:
                        raise TraceParseError(f"line {lineno}: {exc}") from None
                    t.faults[dev] = prof
                elif k == "include":
                    if v in _seen:
                        raise TraceParseError(f"line {lineno}: include cycle through {v}")
                    sub = parse_trace(_data_text(v, base_dir), v, base_dir, _seen | {v})
                    t.steps.extend(sub.steps)
                    t.managers.extend(m for m in sub.managers if m not in t.managers)
                    t.faults = {**sub.faults, **t.faults}
                    t.fixture, t.policy, t.rules = sub.fixture, sub.policy, sub.rules
                else:
                    setattr(t, k, v)
            continue
        try:
            at = int(kv.pop("at"))
        except ValueError:
            raise TraceParseError(f"line {lineno}: at must be integer milliseconds") from None
        action = kv.pop("action", None)
        if action not in ACTIONS:
            raise TraceParseError(f"line {lineno}: unknown action {action!r}")
        t.steps.append(Step(at, action, kv, lineno))
    t.steps.sort(key=lambda s: s.at)  # stable: equal times keep file order
    return t


def load_trace(ref: str) -> Trace:
    p = Path(ref)
    if p.exists():
        return parse_trace(p.read_text(), p.stem, p.parent)
    node = Path(str(resources.files("leasehold") / "data" / ref))
    if not node.is_file():
        raise TraceParseError(f"cannot find trace {ref!r}")
    return parse_trace(node.read_text(), node.stem, node.parent)


# -- system wiring ---------------------------------------------------------


class AuditRecorder:
    """The harness's own audit subscriber: an ordered copy of all traffic."""

    def __init__(self, bus: InProcessBus):
        self.tap = bus.audit_tap("harness")
        self.seen: list[Envelope] = []
        self.produced = 0

    def has_pending(self) -> bool:
        return len(self.tap) > 0

    def step(self) -> None:
        e = self.tap.get_nowait()
        if e is not None:
            self.seen.append(e)
            self.produced += len(observe(e))


@dataclass
class System:
    sched: Scheduler
    bus: InProcessBus
    store: CommitStore
    librarian: Librarian
    root: Root
    managers: dict[str, Manager]
    devices: DeviceRegistry
    ids: IdGen
    audit: AuditRecorder
    bootstrap_events: int = 0
    pre_crash: dict[str, list[Envelope]] = field(default_factory=dict)
    injections: list[dict] = field(default_factory=list)


def build_system(trace: Trace, seed: int = 0, clock: str = "virtual",
                 store_path: str | Path | None = None, faults: Mapping[str, str] | None = None,
                 attempts: Counter | None = None, root_config: RootConfig | None = None) -> System:
    base = trace.base_dir
    specs = parse_fixture(_data_text(trace.fixture, base))
    policy_text = _data_text(trace.policy, base)
    parse_policy(policy_text)  # fail fast on a bad file
    rules = parse_rules(_data_text(trace.rules, base))

    ids = IdGen(seed)
    sched = Scheduler(clock)
    bus = InProcessBus()
    audit = AuditRecorder(bus)
    store_dir = Path(store_path) if store_path is not None else None
    store = CommitStore("dewey", store_dir, genesis_timestamp=sched.now())
    journal = Journal(store_dir / "journal.log" if store_dir is not None else None)
    librarian = Librarian(store, bus, sched, bus.audit_tap("dewey"), journal, ids=ids)
    librarian.start()
    librarian.bootstrap_policy(policy_text)

    all_faults = {**trace.faults, **(faults or {})}
    injector = FaultInjector(seed, attempts)
    devices = DeviceRegistry(specs, injector,
                             {d: FaultProfile.parse(p) for d, p in all_faults.items()})

    root = Root(bus, sched, store, RulePlanner(rules), ids, root_config)
    root.start()
    sched.add_agent(librarian, priority=True)
    sched.add_agent(audit, priority=True)
    sched.add_agent(root)

    mode = root.config.freshness_mode
    probe = lambda dev, b: verify_freshness(store, b, dev, mode).invalidating if not \
        verify_freshness(store, b, dev, mode).fresh else None  # noqa: E731
    profiles = list(trace.managers) or [
        ManagerProfile(a, r, frozenset(c), frozenset(d)) for a, r, c, d in DEFAULT_MANAGERS]
    managers = {}
    for prof in profiles:
        m = Manager(prof, bus, sched, librarian, devices, ids,
                    heartbeat_interval=root.config.heartbeat_interval, freshness=probe)
        managers[prof.agent_id] = m
        sched.add_agent(m)
    bus.connect("operator")
    for m in managers.values():
        m.start()
    sched.quiesce()
    return System(sched, bus, store, librarian, root, managers, devices, ids, audit, 1)


# -- step execution --------------------------------------------------------


def _do_step(sys: System, step: Step) -> None:
    a = step.args
    if step.action in ("inject_intent", "fire_schedule"):
        origin = a.get("origin", "user_explicit" if step.action == "inject_intent" else "scheduled")
        sys.bus.publish(Envelope(sys.ids.token("msg"), "operator", inbox(sys.root.agent_id),
                                 "user_intent", {"intent": a["intent"], "origin": origin,
                                                 "description": a.get("description", a["intent"])},
                                 sent_at=sys.sched.now()))
    elif step.action == "crash_agent":
        agent = a["agent"]
        if agent == sys.librarian.agent_id:
            sys.librarian.crash()
        elif agent in sys.managers:
            m = sys.managers[agent]
            if "after_msgs" in a:
                m.faults.crash_after_msgs = int(a["after_msgs"])
                m.faults.on_crash = lambda mm: _crash_manager(sys, mm)
            else:
                _crash_manager(sys, m)
        else:
            raise TraceParseError(f"line {step.line}: cannot crash {agent!r}")
    elif step.action == "restart_agent":
        agent = a["agent"]
        if agent == sys.librarian.agent_id:
            sys.librarian.start()
            return
        m = sys.managers[agent]
        replay = []
        if a.get("replay_stale", "false").lower() == "true":
            old = _last_exec_in(sys.pre_crash.get(agent, []), a.get("device"))
            if old is None:
                raise TraceParseError(f"line {step.line}: {agent} has no pre-crash exec_request")
            replay.append(old)
        m.resync_after_restart(replay)
    elif step.action == "drop_connection":
        m = sys.managers[a["agent"]]
        _crash_manager(sys, m)
        m.resync_after_restart()
    elif step.action == "inject_exec":
        _inject_exec(sys, step)
    elif step.action == "assert":
        _check_assert(sys, step)


def _last_exec_in(sent: list[Envelope], device: str | None) -> Envelope | None:
    for e in reversed(sent):
        if e.kind == "exec_request" and (device is None or e.payload["command"]["device_id"] == device):
            return e
    return None


def _crash_manager(sys: System, m: Manager) -> None:
    sys.pre_crash[m.agent_id] = list(m.sent)
    m.crash()


def _inject_exec(sys: System, step: Step) -> None:
    a = step.args
    agent, device, which = a["agent"], a["device"], a["lease"]
    m = sys.managers[agent]
    template = _last_exec_in(sys.pre_crash.get(agent, []) + m.sent, device)
    if template is None:
        raise TraceParseError(f"line {step.line}: no earlier exec_request for {device}")
    if which == "pre_crash":
        old = _last_exec_in(sys.pre_crash.get(agent, []), device)
        lease_id = old.lease_id if old else None
    elif which == "unknown":
        lease_id = sys.ids.token("lease")
    elif which == "last_granted":
        granted = [l for l in sys.root.leases.issued.values() if l.target == device]
        lease_id = granted[-1].lease_id if granted else None
    else:
        lease_id = which
    if lease_id is None:
        raise TraceParseError(f"line {step.line}: no {which} lease for {device}")
    cmd = dict(template.payload["command"], lease_id=lease_id, sender=agent)
    e = Envelope(sys.ids.token("msg"), agent, inbox(sys.root.agent_id), "exec_request",
                 {**template.payload, "command": cmd, "resync_attempt": 2},
                 sys.store.head(), lease_id, sys.sched.now())
    sys.bus.publish(e)
    sys.sched.quiesce()
    rej = [r for r in sys.root.rejections if r["in_reply_to"] == e.msg_id]
    actual = rej[0]["code"] if rej else "Accepted"
    sys.injections.append({"line": step.line, "lease": which, "lease_id": lease_id,
                           "expect": a.get("expect"), "actual": actual, "msg_id": e.msg_id})


def _compare(step: Step, actual: Any) -> None:
    a = step.args
    for op in ("eq", "le", "ge", "min", "max"):
        if op not in a:
            continue
        want = parse_value(a[op])
        ok = {"eq": actual == want, "le": actual <= want, "ge": actual >= want,
              "min": actual >= want, "max": actual <= want}[op]
        if not ok:
            raise AssertFailed(step, f"{op} {want!r}", actual)


def _check_assert(sys: System, step: Step) -> None:
    a = step.args
    what = a.get("what")
    snap = sys.store.snapshot()
    if what == "shadow":
        shadow = snap.shadows.get(a["device"])
        actual = shadow.state.get(a["key"]) if shadow else sys.devices.read(a["device"]).state.get(a["key"])
    elif what == "rejections":
        actual = sum(1 for r in sys.root.rejections
                     if r["code"] == a.get("code", r["code"]) and r["stage"] == a.get("stage", r["stage"]))
    elif what == "conflicts":
        actual = sum(1 for _, res in sys.root.conflicts if res.action == a.get("resolution", res.action))
    elif what == "injection":
        inj = sys.injections[-1] if sys.injections else None
        actual = inj["actual"] if inj else None
    elif what == "agent_live":
        info = sys.root.managers.get(a["agent"])
        actual = "true" if info and info.live else "false"
    elif what == "events_lost":
        actual = sys.audit.produced + sys.bootstrap_events - sys.store.event_count()
    else:
        raise TraceParseError(f"line {step.line}: unknown assert {what!r}")
    _compare(step, actual)


# -- oracles ---------------------------------------------------------------


def oracle_first_touch(store: CommitStore, device: str, base: str, upto: str) -> str | None:
    """Brute-force scan of raw commits in (base, upto] for an event on ``device``."""
    commits = store.commits()
    hashes = [c.hash for c in commits]
    if base not in hashes or upto not in hashes:
        return None
    for c in commits[hashes.index(base) + 1: hashes.index(upto) + 1]:
        if any(ev.subject == device for ev in c.events):
            return c.hash
    return None


def _oracle_command_valid(lease: Mapping | None, cmd: Mapping, sender: str, now: int,
                          consumed: set[str], fresh: bool) -> bool:
    if lease is None or not fresh:
        return False
    if now >= lease["expires_at"] or lease["lease_id"] in consumed:
        return False
    if lease["grantee"]["agent"] != sender or lease["operation"] != cmd["operation"]:
        return False
    tgt = lease["target"]
    if tgt != cmd["device_id"] and tgt != f"class:{cmd.get('device_class')}":
        return False
    env = lease["envelope"]
    for name, value in cmd["params"].items():
        c = env["constraints"].get(name)
        if c is None:
            if not env.get("open"):
                return False
            continue
        if "one_of" in c:
            if value not in c["one_of"]:
                return False
        elif not (isinstance(value, (int, float)) and c["min"] <= value <= c["max"]):
            return False
    return True


@dataclass
class OracleVerdicts:
    stale_rejected: int = 0
    stale_correct: int = 0
    invalid_lease_rejected: int = 0
    false_rejections: int = 0
    details: list[str] = field(default_factory=list)


def run_oracles(sys: System) -> OracleVerdicts:
    """Judge every command rejection from the recorded traffic alone."""
    v = OracleVerdicts()
    leases: dict[str, dict] = {}
    consumed: set[str] = set()
    by_id = {e.msg_id: e for e in sys.audit.seen}
    for e in sys.audit.seen:
        p = e.payload
        if e.kind == "lease_grant":
            leases[p["lease"]["lease_id"]] = p["lease"]
        elif e.kind == "exec_ack":
            consumed.add(e.lease_id)
        elif e.kind == "exec_result" and "adapter_rejected" in (p.get("diagnosis") or {}):
            v.false_rejections += 1
            v.details.append(f"adapter rejected acknowledged command {p['lease_id']}")
        elif e.kind == "rejection" and p["stage"] in ("freshness", "lease"):
            trig = by_id.get(p["in_reply_to"])
            if trig is None:
                continue
            dev = p["device"]
            touched = oracle_first_touch(sys.store, dev, trig.base_commit, p["checked_head"]) \
                if trig.base_commit != p["checked_head"] else None
            known = trig.base_commit in sys.store
            fresh = known and touched is None
            if p["code"] == "StaleCommit":
                v.stale_rejected += 1
                if touched is not None and touched == p["evidence"].get("invalidating_commit"):
                    v.stale_correct += 1
                elif fresh:
                    v.false_rejections += 1
                    v.details.append(f"stale verdict on fresh base {trig.base_commit[:12]}")
                continue
            if trig.kind != "exec_request":
                continue
            v.invalid_lease_rejected += 1
            cmd = trig.payload["command"]
            if _oracle_command_valid(leases.get(trig.lease_id), cmd, trig.sender,
                                     e.sent_at, consumed, fresh):
                v.false_rejections += 1
                v.details.append(f"valid lease {trig.lease_id} rejected as {p['code']}")
    return v


def oracle_recovery(store: CommitStore, upto: str, failed: str, now: int,
                    live: Mapping[str, Iterable[str]], roles: Mapping[str, str],
                    config: RootConfig) -> dict[str, str]:
    """Classify the failed agent's tasks by scanning raw events through ``upto``."""
    tasks: dict[str, dict] = {}
    policy_text = None
    for c in store.commits():
        for ev in c.events:
            tid = ev.refs.get("task_id")
            t = tasks.get(tid) if tid else None
            if ev.kind == "task_dispatch":
                tasks[ev.data["task"]["task_id"]] = dict(ev.data["task"])
            elif ev.kind == "recovery_outcome":
                tasks[ev.data["task"]["task_id"]] = dict(ev.data["task"])
            elif ev.kind == "policy_update":
                policy_text = ev.data["text"]
            elif t is None:
                continue
            elif ev.kind == "exec_result":
                if ev.outcome == "ok":
                    t["phase"] = "confirmed"
                elif t["phase"] != "confirmed":
                    t["phase"] = "escalated"
            elif t["phase"] == "confirmed":
                continue
            elif ev.kind == "proposal" and t["phase"] in ("dispatched", "retrying"):
                t["phase"] = "blocked" if ev.outcome == "rejected" else "proposed"
            elif ev.kind == "lease_grant":
                t["phase"] = "granted"
            elif ev.kind == "lease_reject":
                if ev.outcome == "escalated":
                    t["phase"] = "escalated"
                elif ev.data.get("stage") in ("conflict", "policy"):
                    t["phase"] = "blocked"
        if c.hash == upto:
            break
    policy = parse_policy(policy_text or "")
    out = {}
    for tid in sorted(tasks):
        t = tasks[tid]
        if t["assigned_to"] != failed:
            continue
        if t["phase"] == "confirmed":
            out[tid] = "closed"
        elif t["phase"] in ("blocked", "escalated"):
            out[tid] = "escalated"
        else:
            cands = [m for m in sorted(live) if m != failed and t["capability"] in live[m]
                     and isinstance(evaluate(policy, roles[m], t["device_class"], t["operation"],
                                             t["params"]), Permit)]
            if cands:
                out[tid] = "reissued"
            elif t["attempts"] + 1 > config.max_attempts:
                out[tid] = "escalated"
            else:
                out[tid] = "queued"
    return out


# -- metrics ---------------------------------------------------------------


def _p95(xs: list[float]) -> float:
    if not xs:
        return 0.0
    if len(xs) == 1:
        return float(xs[0])
    return statistics.quantiles(xs, n=100, method="inclusive")[94]


@dataclass
class MetricsReport:
    trace: str
    seed: int
    head: str
    tasks_total: int
    tasks_completed: int
    conflicts_detected: int
    conflicts_resolved: int
    stale_rejected: int
    invalid_lease_rejected: int
    false_rejections: int
    events_produced: int
    events_persisted: int
    lease_validation_p95: float  # microseconds
    per_hop_overhead_p95: float  # milliseconds

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> bytes:
        d = self.to_dict()
        # timings vary run to run; the canonical form keeps only replay-stable fields
        d.pop("lease_validation_p95")
        d.pop("per_hop_overhead_p95")
        return canonical_bytes(d)

    def to_text(self) -> str:
        return "\n".join([
            f"trace                    {self.trace} (seed {self.seed})",
            f"HEAD                     {self.head}",
            f"tasks completed          {self.tasks_completed}/{self.tasks_total}",
            f"conflicts resolved       {self.conflicts_resolved}/{self.conflicts_detected}",
            f"stale commands rejected  {self.stale_rejected}",
            f"invalid-lease rejections {self.invalid_lease_rejected}",
            f"false rejections         {self.false_rejections}",
            f"events persisted         {self.events_persisted}/{self.events_produced}",
            f"lease validation p95     {self.lease_validation_p95:.2f} us",
            f"per-hop overhead p95     {self.per_hop_overhead_p95:.3f} ms",
        ])


def collect_metrics(sys: System, trace: Trace, seed: int) -> tuple[MetricsReport, OracleVerdicts]:
    v = run_oracles(sys)
    tasks, done = set(), set()
    detected = resolved = 0
    for _, _, ev in sys.store.iter_events():
        if ev.kind == "task_dispatch":
            tasks.add(ev.subject)
        elif ev.kind == "exec_result" and ev.outcome == "ok":
            done.add(ev.refs["task_id"])
        elif ev.kind == "conflict_report":
            detected += 1
        elif ev.kind == "conflict_resolution" and ev.data["action"] != "escalate":
            resolved += 1
    report = MetricsReport(
        trace.name, seed, sys.store.head(), len(tasks), len(done & tasks), detected, resolved,
        v.stale_correct, v.invalid_lease_rejected, v.false_rejections,
        sys.audit.produced + sys.bootstrap_events, sys.store.event_count(),
        _p95([ns / 1000 for ns in sys.root.validate_ns]), _p95(sys.sched.hop_ms))
    return report, v


@dataclass
class RunResult:
    report: MetricsReport
    verdicts: OracleVerdicts
    system: System
    trace: Trace


def run_trace(trace: Trace | str, seed: int = 0, clock: str = "virtual",
              store_path: str | Path | None = None, faults: Mapping[str, str] | None = None,
              attempts: Counter | None = None, root_config: RootConfig | None = None) -> RunResult:
    if isinstance(trace, str):
        trace = load_trace(trace)
    sys = build_system(trace, seed, clock, store_path, faults, attempts, root_config)
    epoch = sys.sched.epoch_ms
    last = 0
    for step in trace.steps:
        sys.sched.run_until(epoch + step.at)
        _do_step(sys, step)
        sys.sched.quiesce()
        last = step.at
    sys.sched.run_until(epoch + last + SETTLE_MS)
    if sys.librarian.up:
        sys.librarian.flush()
    sys.sched.quiesce()
    report, v = collect_metrics(sys, trace, seed)
    return RunResult(report, v, sys, trace)


def run_trials(trace: Trace | str, seeds: Iterable[int], faults: Mapping[str, str] | None = None,
               shared_attempts: bool = True, clock: str = "virtual") -> list[RunResult]:
    """Repeat a trace; fault attempt counters persist across trials when shared."""
    attempts = Counter() if shared_attempts else None
    return [run_trace(trace, s, clock, faults=faults,
                      attempts=attempts if shared_attempts else Counter()) for s in seeds]


# -- randomized crash traces -------------------------------------------------

_EXTRA_MANAGERS = (
    "wooster:home_assistant:light,speaker:light.living_room,speaker.living_room",
    "bingley:mobile_app:ui_automation:tv.living_room",
)
_INTENTS = ("work_from_home", "evening_wind_down", "secure_front_door")
_ORIGINS = ("user_explicit", "scheduled", "system_default")


def random_crash_trace(seed: int) -> str:
    """Trace text mixing random intents with manager crashes, sometimes adding spare managers."""
    rng = random.Random(seed)
    lines = [f"name=crash-{seed}", "fixture=demo.devices", "policy=demo.policy",
             "rules=demo.rules"]
    agents = [a for a, *_ in DEFAULT_MANAGERS]
    lines += [f"manager={a}:{r}:{','.join(c)}:{','.join(d)}" for a, r, c, d in DEFAULT_MANAGERS]
    for extra in _EXTRA_MANAGERS:
        if rng.random() < 0.4:
            lines.append(f"manager={extra}")
            agents.append(extra.split(":", 1)[0])
    t = 0
    for _ in range(rng.randint(1, 4)):
        t += rng.randint(200, 8_000)
        lines.append(f"at={t} action=inject_intent intent={rng.choice(_INTENTS)} "
                     f"origin={rng.choice(_ORIGINS)}")
    for victim in rng.sample(agents, rng.randint(1, min(2, len(agents)))):
        at = rng.randint(100, t + 2_000)
        if rng.random() < 0.6:
            lines.append(f"at={at} action=crash_agent agent={victim} "
                         f"after_msgs={rng.randint(1, 4)}")
        else:
            lines.append(f"at={at} action=crash_agent agent={victim}")
        if rng.random() < 0.3:
            lines.append(f"at={at + rng.randint(1_000, 30_000)} action=restart_agent "
                         f"agent={victim}")
    lines.append(f"at={t + rng.choice((5_000, 60_000, 200_000))} action=advance")
    return "\n".join(lines) + "\n"


# -- benchmark -------------------------------------------------------------


@dataclass
class BenchResult:
    path: str
    depth: int
    n: int
    p50: float  # microseconds
    p95: float
    p99: float

    def to_text(self) -> str:
        return (f"{self.path:<14} depth={self.depth:<6} n={self.n:<7} "
                f"p50={self.p50:.3f}us p95={self.p95:.3f}us p99={self.p99:.3f}us")


def _deep_store(depth: int) -> CommitStore:
    store = CommitStore("dewey")
    for i in range(depth):
        ev = EventRecord("agent_status", "bench", f"agent-{i % 7}", "ok", "tick")
        store.append_commit("dewey", [ev], store.snapshot(), i + 1)
    return store


BATCH = 10


def bench_lease_validation(n: int = 100_000, depth: int = 10, full: bool = False,
                           store: CommitStore | None = None) -> BenchResult:
    if n < 10_000:
        raise ValueError("n must be at least 10^4")
    store = store or _deep_store(depth)
    head = store.head()
    table = LeaseTable(IdGen(1))
    rule = parse_policy("r light set_light brightness=0..60% tone={club,warm}").lookup(
        "r", "light", "set_light")
    permit = Permit(rule.bounds, rule)
    leases = [table.issue_lease(permit, Grantee("r", "m"), "light.living_room", "set_light",
                                head, head, 0, "bench") for _ in range(BATCH)]
    cmds = [AdapterCommand("light.living_room", "set_light", {"brightness": 40, "tone": "club"},
                           "m", l.lease_id, "light") for l in leases]
    probe = (lambda d, b: store.first_touch_after(d, b)) if full else None
    samples = []
    consumed: set[str] = set()
    pairs = list(zip(leases, cmds))
    perf = time.perf_counter_ns
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for _ in range(n // BATCH):
            consumed.clear()
            t0 = perf()
            for lease, cmd in pairs:
                validate_lease(lease, cmd, 1, head, consumed, probe)
            samples.append((perf() - t0) / BATCH / 1000)
    finally:
        if gc_was:
            gc.enable()
    if len(consumed) != BATCH:
        raise RuntimeError("benchmark commands were not accepted")
    q = statistics.quantiles(samples, n=100, method="inclusive")
    return BenchResult("full" if full else "metadata-only", len(store) - 1, n,
                       statistics.median(samples), q[94], q[98])
