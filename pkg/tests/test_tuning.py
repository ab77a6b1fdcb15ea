import random

import pytest
from hypothesis import given, settings, strategies as st

from qbench.testing import SimulatedExecutor
from qbench.tuning import (
    DEFAULT_RCVBUF_BYTES,
    OFFLOAD_FEATURES,
    HostTuning,
    ReadBackMismatch,
    TuningCommands,
    TuningError,
    TuningPermissionError,
    TuningResetError,
    apply_host_tuning,
    desired_settings,
    parse_offload_profile,
    probe_settings,
    rcvbuf_from_multiple,
    reset_host_tuning,
)


def test_default_is_208_kib():
    assert DEFAULT_RCVBUF_BYTES == 212992
    assert rcvbuf_from_multiple(1) == 212992
    assert rcvbuf_from_multiple(0.5) == 106496
    with pytest.raises(ValueError):
        rcvbuf_from_multiple(0)


def test_apply_rcvbuf_multiple_16_reads_back():
    sim = SimulatedExecutor()
    applied = apply_host_tuning(HostTuning(udp_rcvbuf_bytes=rcvbuf_from_multiple(16)), sim)
    assert probe_settings(["net.core.rmem_max", "net.core.rmem_default"], sim) == {
        "net.core.rmem_max": "3407872", "net.core.rmem_default": "3407872"}
    assert dict(applied.prior) == {"net.core.rmem_max": "212992", "net.core.rmem_default": "212992"}


def test_offloads_all_off():
    sim = SimulatedExecutor()
    apply_host_tuning(HostTuning(offload_profile=parse_offload_profile("none")), sim)
    out = sim.run("ethtool -k eth0").stdout
    for feature in OFFLOAD_FEATURES.values():
        assert f"{feature}: off" in out


def test_empty_tuning_issues_no_commands():
    sim = SimulatedExecutor()
    applied = apply_host_tuning(HostTuning(), sim)
    assert applied.empty and sim.log == []
    reset_host_tuning(applied, sim)
    assert sim.log == []


def test_unchanged_setting_not_recorded():
    sim = SimulatedExecutor()
    applied = apply_host_tuning(HostTuning(udp_rcvbuf_bytes=212992), sim)
    assert applied.empty and sim.writes == []


def test_round_trip_bit_identical():
    sim = SimulatedExecutor()
    before = sim.snapshot()
    t = HostTuning(udp_rcvbuf_bytes=3407872, udp_sndbuf_bytes=425984,
                   offload_profile=parse_offload_profile("gso"))
    applied = apply_host_tuning(t, sim)
    assert sim.snapshot() != before
    confirmation = reset_host_tuning(applied, sim)
    assert sim.snapshot() == before
    assert set(confirmation.restored) == {s for s, _ in applied.prior}


@settings(max_examples=60, deadline=None)
@given(
    rcv=st.one_of(st.none(), st.sampled_from([0.5, 1, 2, 4, 8, 16, 32, 64])),
    snd=st.one_of(st.none(), st.integers(1, 2**31)),
    offloads=st.dictionaries(st.sampled_from(sorted(OFFLOAD_FEATURES)), st.booleans()),
    start=st.dictionaries(st.sampled_from(sorted(OFFLOAD_FEATURES)), st.sampled_from(["on", "off"])),
)
def test_round_trip_property(rcv, snd, offloads, start):
    sim = SimulatedExecutor()
    for flag, state in start.items():
        sim.offloads["eth0"][OFFLOAD_FEATURES[flag]] = state
    before = sim.snapshot()
    t = HostTuning(rcvbuf_from_multiple(rcv) if rcv else None, snd, tuple(offloads.items()))
    reset_host_tuning(apply_host_tuning(t, sim), sim)
    assert sim.snapshot() == before


def test_denied_restore_named():
    sim = SimulatedExecutor()
    applied = apply_host_tuning(HostTuning(udp_rcvbuf_bytes=3407872, offload_profile=(("gso", False),)), sim)
    sim.deny_writes.add("net.core.rmem_max")
    with pytest.raises(TuningResetError) as err:
        reset_host_tuning(applied, sim)
    assert list(err.value.failures) == ["net.core.rmem_max"]
    assert "net.core.rmem_max" in str(err.value)
    # the others were still restored
    assert sim.sysctls["net.core.rmem_default"] == "212992"
    assert sim.offloads["eth0"]["generic-segmentation-offload"] == "on"


def test_unknown_interface():
    sim = SimulatedExecutor()
    with pytest.raises(TuningError, match="eth7"):
        apply_host_tuning(HostTuning(offload_profile=(("gso", False),), interface_name="eth7"), sim)
    assert sim.writes == []


def test_read_back_mismatch_rolls_back():
    sim = SimulatedExecutor()
    before = sim.snapshot()
    sim.ignore_writes.add("net.core.rmem_default")
    with pytest.raises(ReadBackMismatch) as err:
        apply_host_tuning(HostTuning(udp_rcvbuf_bytes=3407872), sim)
    assert err.value.setting == "net.core.rmem_default"
    assert sim.snapshot() == before


def test_permission_denied():
    sim = SimulatedExecutor()
    sim.deny_writes.add("net.core.rmem_max")
    with pytest.raises(TuningPermissionError):
        apply_host_tuning(HostTuning(udp_rcvbuf_bytes=3407872), sim)


def test_failed_offload_rolls_back_buffers():
    sim = SimulatedExecutor()
    before = sim.snapshot()
    sim.deny_writes.add("tso")
    with pytest.raises(TuningPermissionError):
        apply_host_tuning(HostTuning(udp_rcvbuf_bytes=3407872, offload_profile=parse_offload_profile("none")), sim)
    assert sim.snapshot() == before


def test_custom_command_templates():
    sim = SimulatedExecutor()
    cmds = TuningCommands.from_mapping({"rcvbuf_keys": ["net.core.rmem_max"]})
    apply_host_tuning(HostTuning(udp_rcvbuf_bytes=1000), sim, cmds)
    assert sim.sysctls["net.core.rmem_max"] == "1000"
    assert sim.sysctls["net.core.rmem_default"] == "212992"


def test_invalid_profile():
    with pytest.raises(ValueError):
        parse_offload_profile("gso+lro")
    with pytest.raises(ValueError):
        HostTuning(udp_rcvbuf_bytes=-1)


def test_random_fault_injection_restores_or_names():
    """Whatever single write is denied, the host ends either restored or the failure is named."""
    rng = random.Random(3)
    keys = ["net.core.rmem_max", "net.core.rmem_default", "net.core.wmem_max", "gso", "gro", "tso"]
    for _ in range(200):
        sim = SimulatedExecutor()
        before = sim.snapshot()
        t = HostTuning(rcvbuf_from_multiple(rng.choice([2, 16])), rcvbuf_from_multiple(4),
                       parse_offload_profile(rng.choice(["none", "gso"])))
        victim = rng.choice(keys)
        applied = None
        changes = {s.split(":")[-1] for s, v in desired_settings(t, TuningCommands()) if before[s] != v}
        if rng.random() < 0.5:
            sim.deny_writes.add(victim)
            if victim in changes:
                with pytest.raises(TuningPermissionError):
                    apply_host_tuning(t, sim)
            else:
                reset_host_tuning(apply_host_tuning(t, sim), sim)
            assert sim.snapshot() == before
        else:
            applied = apply_host_tuning(t, sim)
            sim.deny_writes.add(victim)
            touched = {s.split(":")[-1] if s.startswith("offload:") else s for s, _ in applied.prior}
            if victim in touched:
                with pytest.raises(TuningResetError) as err:
                    reset_host_tuning(applied, sim)
                assert any(victim in s for s in err.value.failures)
            else:
                reset_host_tuning(applied, sim)
                assert sim.snapshot() == before
