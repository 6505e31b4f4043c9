from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from leasehold.cli import main
from leasehold.commitstore import LOG_NAME, CommitStore
from leasehold.harness import (AssertFailed, TraceParseError, load_trace, parse_trace,
                               run_trace)

SCENES = load_trace("scenes/all.trace").base_dir
GOLDEN = SCENES / "all.golden.json"
HEADER = "fixture=demo.devices\npolicy=demo.policy\nrules=demo.rules\n"


@pytest.mark.parametrize("text, needle", [
    ("colour=blue\n", "unknown header"),
    ("at=soon action=advance\n", "integer"),
    ("at=1 action=dance\n", "unknown action"),
    ("fault=tv.living_room:gremlins\n", "gremlins"),
    ("include=nowhere.trace\n", "cannot find"),
    ("manager=jeeves:home_assistant\n", "manager spec"),
])
def test_parse_errors_are_specific(text, needle):
    with pytest.raises(TraceParseError, match=needle):
        parse_trace(text, "bad", SCENES)


def test_include_cycle(tmp_path):
    (tmp_path / "a.trace").write_text("include=b.trace\n")
    (tmp_path / "b.trace").write_text("include=a.trace\n")
    with pytest.raises(TraceParseError, match="cycle"):
        load_trace(str(tmp_path / "a.trace"))


def test_steps_sorted_stably():
    t = parse_trace(HEADER + "at=5 action=advance n=1\nat=1 action=advance n=2\n"
                    "at=5 action=advance n=3\n", "t", SCENES)
    assert [s.args["n"] for s in t.steps] == ["2", "1", "3"]


def test_failed_assert_reports_expected_and_actual():
    t = parse_trace("include=scene1.trace\n"
                    "at=6000 action=assert what=shadow device=light.living_room key=brightness "
                    "eq=99\n", "t", SCENES)
    with pytest.raises(AssertFailed) as info:
        run_trace(t)
    assert info.value.actual == 55 and "99" in str(info.value.expected)


def test_same_seed_same_history():
    a = run_trace("scenes/scene2.trace", seed=4)
    b = run_trace("scenes/scene2.trace", seed=4)
    assert a.report.canonical() == b.report.canonical()
    assert [c.hash for c in a.system.store.commits()] == [c.hash for c in b.system.store.commits()]


def test_all_trace_matches_golden():
    r = run_trace("scenes/all.trace", seed=7)
    assert json.loads(r.report.canonical()) == json.loads(GOLDEN.read_text())


# -- command line ------------------------------------------------------------


def replay(tmp_path, *extra) -> int:
    return main(["--store", str(tmp_path), "replay", "scenes/scene2.trace", "--seed", "1", *extra])


def test_replay_then_verify(tmp_path, capsys):
    assert replay(tmp_path) == 0
    assert main(["--store", str(tmp_path), "verify"]) == 0
    assert "ok:" in capsys.readouterr().out


def test_replay_starts_from_genesis(tmp_path):
    replay(tmp_path)
    first = CommitStore("dewey", tmp_path).head()
    replay(tmp_path)
    assert CommitStore("dewey", tmp_path).head() == first


def test_verify_names_tampered_commit(tmp_path, capsys):
    replay(tmp_path)
    store = CommitStore("dewey", tmp_path)
    victim = store.commits()[3]
    raw = (tmp_path / LOG_NAME).read_bytes()
    needle = victim.encode()
    at = raw.index(needle) + needle.index(b'"timestamp":') + len(b'"timestamp":')
    digit = raw[at:at + 1]
    flipped = b"9" if digit != b"9" else b"8"
    (tmp_path / LOG_NAME).write_bytes(raw[:at] + flipped + raw[at + 1:])
    capsys.readouterr()
    assert main(["--store", str(tmp_path), "verify"]) == 1
    assert victim.hash in capsys.readouterr().err


def test_log_device_matches_timeline(tmp_path, capsys):
    replay(tmp_path)
    capsys.readouterr()
    assert main(["--store", str(tmp_path), "log", "--device", "light.living_room"]) == 0
    lines = capsys.readouterr().out.splitlines()
    store = CommitStore("dewey", tmp_path)
    timeline = store.timeline_query("light.living_room")
    assert len(lines) == len(timeline)
    assert [l.split()[0] for l in lines] == [c.hash[:12] for c, _, _ in timeline]


def test_show_prints_snapshot(tmp_path, capsys):
    replay(tmp_path)
    head = CommitStore("dewey", tmp_path).head()
    capsys.readouterr()
    assert main(["--store", str(tmp_path), "show", head[:10]]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["commit"]["hash"] == head and out["snapshot"]["head"] == head


def test_golden_mismatch_fails(tmp_path, capsys):
    assert main(["--store", str(tmp_path), "replay", "scenes/all.trace", "--seed", "7",
                 "--golden", str(GOLDEN)]) == 0
    assert main(["--store", str(tmp_path), "replay", "scenes/all.trace", "--seed", "8",
                 "--golden", str(GOLDEN)]) == 1
    assert "golden mismatch head" in capsys.readouterr().err


def test_policy_check(tmp_path, capsys):
    good = SCENES.parent / "demo.policy"
    assert main(["policy", "check", str(good)]) == 0
    bad = tmp_path / "bad.policy"
    bad.write_text("home_assistant light set_power\nhome_assistant light set_power\n")
    assert main(["policy", "check", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_missing_store_is_an_error(tmp_path, capsys):
    assert main(["--store", str(tmp_path / "none"), "verify"]) == 1
    assert "no commit store" in capsys.readouterr().err


def test_demos_run(tmp_path):
    for demo in sorted((Path(__file__).parent.parent / "demos").glob("*.py")):
        out = subprocess.run([sys.executable, str(demo)], capture_output=True, text=True,
                             cwd=tmp_path)
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip()
