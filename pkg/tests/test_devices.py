from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import data_text, light_lease
from leasehold.devices import (Applied, DeviceRegistry, Faulted, FaultInjector, FaultProfile,
                               FixtureError, Rejected, UnknownDevice, UnknownOperation,
                               parse_fixture)
from leasehold.ids import IdGen
from leasehold.lease import AdapterCommand, Grantee, LeaseTable
from leasehold.policy import OPEN_ENVELOPE, Permit

HEAD = "a" * 64


@pytest.fixture
def registry():
    return DeviceRegistry(parse_fixture(data_text("demo.devices")))


def test_fixture_has_testbed_classes(registry):
    classes = {registry.class_of(d) for d in registry.adapters}
    assert classes == {"light", "speaker", "camera", "tv"}


def test_fresh_light_is_off(registry):
    s = registry.read("light.living_room").state
    assert s["power"] == "off" and s["brightness"] == 0


def test_valid_lease_applies(registry):
    lease, cmd, _ = light_lease(HEAD)
    r = registry.apply(cmd, lease, 1, HEAD)
    assert isinstance(r, Applied)
    assert r.state["brightness"] == 55 and r.state["power"] == "on"


def test_wrong_device_lease_rejected_without_change(registry):
    lease, cmd, _ = light_lease(HEAD)
    before = registry.read("speaker.living_room")
    bad = AdapterCommand("speaker.living_room", "set_light", cmd.params, "jeeves", lease.lease_id)
    with pytest.raises(UnknownOperation):
        registry.apply(bad, lease, 1, HEAD)
    bad = AdapterCommand("speaker.living_room", "set_volume", {"volume": 3}, "jeeves",
                         lease.lease_id)
    r = registry.apply(bad, lease, 1, HEAD)
    assert isinstance(r, Rejected) and r.decision.code == "WrongTarget"
    assert registry.read("speaker.living_room") == before


def test_icon_misidentification_first_attempt_only():
    specs = parse_fixture(data_text("demo.devices"))
    reg = DeviceRegistry(specs, FaultInjector(0),
                         {"tv.living_room": FaultProfile.parse("icon_misidentification")})
    table = LeaseTable(IdGen(1))
    results = []
    for _ in range(2):
        l = table.issue_lease(Permit(OPEN_ENVELOPE, None), Grantee("mobile_app", "darcy"),
                              "tv.living_room", "set_power", HEAD, HEAD, 0, "tv off")
        cmd = AdapterCommand("tv.living_room", "set_power", {"power": "off"}, "darcy", l.lease_id)
        before = reg.read("tv.living_room")
        results.append(reg.apply(cmd, l, 1, HEAD))
        if isinstance(results[-1], Faulted):
            assert reg.read("tv.living_room") == before
    assert isinstance(results[0], Faulted)
    assert results[0].diagnosis["tapped_icon"] != results[0].diagnosis["expected_icon"]
    assert isinstance(results[1], Applied) and results[1].state["power"] == "off"


def test_timeout_and_intermittent_profiles():
    assert FaultProfile.parse("timeout(8000)").arg == 8000
    assert str(FaultProfile.parse("intermittent(0.25)")) == "intermittent(0.25)"
    with pytest.raises(FixtureError):
        FaultProfile.parse("gremlins")
    with pytest.raises(FixtureError):
        FaultProfile.parse("timeout")


def test_unknown_device(registry):
    with pytest.raises(UnknownDevice):
        registry.read("fridge")


def test_fixture_errors():
    with pytest.raises(FixtureError):
        parse_fixture("device x\nclass light\n")
    with pytest.raises(FixtureError):
        parse_fixture("device x\nclass light\nop set a\nrange a 5..1\n")
    with pytest.raises(FixtureError):
        parse_fixture("device x\nclass light\nop set a\nrange a 0..5\ninitial a=9\n")


@settings(max_examples=1000, deadline=None)
@given(st.sampled_from(["sender", "device", "late", "brightness", "consumed"]),
       st.integers(-50, 200))
def test_rejected_apply_never_mutates(kind, b):
    reg = DeviceRegistry(parse_fixture(data_text("demo.devices")))
    lease, cmd, _ = light_lease(HEAD)
    now = 1
    if kind == "sender":
        cmd = replace(cmd, sender="darcy")
    elif kind == "device":
        cmd = replace(cmd, device_id="camera.front_door", operation="set_power",
                      params={"power": "on"})
    elif kind == "late":
        now = lease.expires_at
    elif kind == "brightness":
        if 0 <= b <= 60:
            b = 61
        cmd = replace(cmd, params={"brightness": b})
    elif kind == "consumed":
        reg.adapter("light.living_room").consumed.add(lease.lease_id)
    before = {d: reg.read(d) for d in reg.adapters}
    r = reg.apply(cmd, lease, now, HEAD)
    assert isinstance(r, Rejected)
    assert {d: reg.read(d) for d in reg.adapters} == before


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 60), st.sampled_from(["club", "warm", "cool", "neutral"]))
def test_apply_is_deterministic(b, tone):
    outs = []
    for _ in range(2):
        reg = DeviceRegistry(parse_fixture(data_text("demo.devices")))
        lease, cmd, _ = light_lease(HEAD)
        cmd = replace(cmd, params={"brightness": b, "tone": tone})
        outs.append(reg.apply(cmd, lease, 1, HEAD))
    assert outs[0] == outs[1]
