"""Acceptance criteria, one check each.

Every check prints a single ``PASS: ...`` or ``FAIL: ...`` line and then
asserts, so ``pytest -s tests/test_acceptance.py`` doubles as a report and
``python3 tests/test_acceptance.py`` runs them without pytest.
"""

import csv
import io
import json
import random
import sys
import time
from fractions import Fraction
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import FIXTURES, PARSE_CASES, golden, parse_fixture  # noqa: E402
from helpers import close, oracle_summary, perf_dump, qlog_events, qlog_ndjson, random_plan_dict, random_vector, run_fuzz  # noqa: E402
from test_perfcat import check_breakdown_laws  # noqa: E402
from test_plan import _mutations  # noqa: E402

from qbench.analysis import ack_reduction, goodput, loss_rate, summarize  # noqa: E402
from qbench.cli import main as cli_main  # noqa: E402
from qbench.orchestrator import RunOptions, run_measurement  # noqa: E402
from qbench.parsers import count_acks_qlog, parse_perf_script  # noqa: E402
from qbench.perfcat import Category, Rule, category_breakdown, parse_rules  # noqa: E402
from qbench.plan import expand_matrix, plan_digest, plan_from_dict  # noqa: E402
from qbench.provenance import EnvironmentProbe, HardwareDescriptor, HostProbe, fingerprint  # noqa: E402
from qbench.testing import SimulatedExecutor  # noqa: E402
from qbench.tuning import HostTuning, apply_host_tuning, parse_offload_profile, rcvbuf_from_multiple, reset_host_tuning  # noqa: E402


def report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'}: {name}: {detail}")
    return ok


@pytest.fixture(autouse=True)
def _show_report_lines(capsys):
    # keep the PASS/FAIL lines visible in a plain `pytest -v` log
    yield
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith(("PASS: ", "FAIL: "))]
    with capsys.disabled():
        for ln in lines:
            print(f"\n{ln}", end="")


# ---------------------------------------------------------------------------


def check_e2e_loopback(tmp: Path):
    plan = tmp / "plan.toml"
    plan.write_text("""\
repetitions = 3
transfer_size = "100MB"
timeout = 60
collectors = ["ethtool", "netstat"]

[implementations.ref]
client = "{python} -m qbench.refendpoints"
server = "{python} -m qbench.refendpoints"
version = "{python} -c 'import qbench; print(qbench.__version__)'"
ready_pattern = "^ready"
process = "refendpoints"
""")
    out = tmp / "out"
    t0 = time.monotonic()
    rc = cli_main(["-q", "run", "--plan", str(plan), "--out", str(out), "--simulate-host-tools"])
    elapsed = time.monotonic() - t0
    rc_parse = cli_main(["-q", "parse", "--out", str(out)])
    text = (out / "results.csv").read_text()
    rows = list(csv.DictReader(io.StringIO("".join(ln for ln in text.splitlines(True) if not ln.startswith("#")))))
    verdicts = [r["verdict"] for r in rows]
    exact = all(
        float(r["goodput_mbps"]) == int(r["transfer_bytes"]) * 8 / float(r["duration_s"]) / 1e6 for r in rows
    )
    ok = rc == 0 and rc_parse == 0 and verdicts == ["ok"] * 3 and exact and elapsed < 60
    rates = ", ".join(f"{float(r['goodput_mbps']):.0f}" for r in rows)
    return report("end-to-end loopback", ok,
                  f"verdicts={verdicts} goodput exact={exact} [{rates}] Mbit/s, run took {elapsed:.1f} s (< 60)")


def check_goodput_loss_math():
    g = goodput(8 * 10**9, 19.69)
    l1 = loss_rate(11400, 5688600)
    l2 = loss_rate(7000, 6993000)
    qa = qlog_ndjson(qlog_events(180_000, 0, 0, seed=1))
    qb = qlog_ndjson(qlog_events(46_000, 134_000, 0, seed=2))
    before = count_acks_qlog(qa).ack_frames_sent
    after = count_acks_qlog(qb).ack_frames_sent
    ratio = ack_reduction(before, after)
    ok = (
        abs(g - 3250) / 3250 <= 0.005
        and abs(l1 * 100 - 0.20) <= 0.01
        and abs(l2 * 100 - 0.10) <= 0.01
        and ratio == Fraction(46_000, 180_000)
        and round(float(ratio) * 100, 1) == 25.6
    )
    return report("goodput/loss/ACK math", ok,
                  f"goodput={g:.1f} Mbit/s, loss={l1 * 100:.3f}% / {l2 * 100:.3f}%, ACK ratio={ratio} = {float(ratio) * 100:.1f}%")


def check_parser_fixtures(n=100_000):
    kinds = {"ethtool": "ethtool", "netstat": "netstat", "pidstat": "pidstat", "perf": "perf",
             "pcap": "pcap", "qlog": "qlog", "sqlog": "qlog"}
    mismatched = [name for name in sorted(PARSE_CASES) if parse_fixture(name) != golden(name)]
    covered = {kinds[k] for name in PARSE_CASES for k in kinds if k in name}
    seeds = [(FIXTURES / name).read_bytes() for name in sorted(PARSE_CASES)]
    total, crashes = run_fuzz(n, seeds, seed=20261016)
    ok = not mismatched and covered >= {"ethtool", "netstat", "pidstat", "perf", "pcap", "qlog"} and not crashes
    return report("parser fixtures + fuzz", ok,
                  f"{len(PARSE_CASES)} fixtures golden (mismatched: {mismatched or 'none'}), "
                  f"{total} fuzz inputs, {len(crashes)} crashes")


def check_perf_categorization(n=1000):
    rules = parse_rules("exact\tsendmsg\tPacketIO\n", "t")
    samples = [("srv", 7, ["sendmsg", "main"])] * 40 + [("srv", 7, ["memcpy", "main"])] * 60
    b = category_breakdown(parse_perf_script(perf_dump(samples)), rules)
    exact = b.total_samples == 100 and b.fraction(Category.PACKET_IO) == Fraction(2, 5)
    rng = random.Random(5)
    laws = all(check_breakdown_laws(rng) for _ in range(n))
    # monotonicity on the fixed dump as well
    grown = category_breakdown(parse_perf_script(perf_dump(samples)), rules.extended(Rule("exact", "memcpy", Category.FILE_IO)))
    mono = grown.categorized_samples >= b.categorized_samples
    return report("perf categorization", exact and laws and mono,
                  f"PacketIO fraction={b.fraction(Category.PACKET_IO)} (0.40 exact: {exact}), "
                  f"{n} random sets count/fraction/monotonicity laws hold: {laws and mono}")


def check_stats_oracle(n=10_000):
    rng = random.Random(77)
    worst = 0.0
    bad = 0
    order = 0
    for _ in range(n):
        v = random_vector(rng)
        s = summarize(v)
        want = oracle_summary(v)
        for k in ("mean", "median", "q1", "q3", "min", "max", "stdev"):
            got = getattr(s, k)
            if not close(got, want[k]):
                bad += 1
            denom = max(abs(got), abs(want[k]))
            if denom:
                worst = max(worst, abs(got - want[k]) / denom)
        if not (s.min <= s.q1 <= s.median <= s.q3 <= s.max):
            order += 1
    return report("statistics oracle", bad == 0 and order == 0,
                  f"{n} vectors, {bad} mismatches > 1e-12 rel (worst {worst:.1e}), {order} ordering violations")


def check_tuning_round_trip(tmp: Path):
    failures = []
    # direct apply/reset on random tunings
    rng = random.Random(11)
    for i in range(200):
        sim = SimulatedExecutor()
        before = sim.snapshot()
        t = HostTuning(rcvbuf_from_multiple(rng.choice([0.5, 1, 2, 4, 8, 16, 32, 64])),
                       rng.choice([None, 425984]), parse_offload_profile(rng.choice(["none", "gso", "gso+gro", "all"])))
        reset_host_tuning(apply_host_tuning(t, sim), sim)
        if sim.snapshot() != before:
            failures.append(f"direct#{i}")
    # injected failure at every workflow phase
    plan = plan_from_dict({
        "repetitions": 1, "transfer_size": 10**5, "timeout": 30,
        "tuning": {"udp_rcvbuf_multiple": 16, "offloads": "none"},
        "implementations": {"ref": {"client": "{python} -m qbench.refendpoints",
                                    "server": "{python} -m qbench.refendpoints", "ready_pattern": "^ready"}},
    })
    spec = expand_matrix(plan)[0]
    phases = ["setup", "pre", "run", "post"]
    for phase in phases:
        client, server = SimulatedExecutor(), SimulatedExecutor()
        before = (client.snapshot(), server.snapshot())

        def hook(p, phase=phase):
            if p == phase:
                raise RuntimeError(f"injected in {p}")

        art = run_measurement(spec, client, server, ["netstat"], tmp / phase, RunOptions(on_phase=hook))
        if (client.snapshot(), server.snapshot()) != before or art.status != f"{phase}-failed":
            failures.append(phase)
    return report("tuning round trip", not failures,
                  f"200 random tunings + injected failures in {'/'.join(phases)}: "
                  f"{'all restored bit-identically' if not failures else 'not restored: ' + ', '.join(failures)}")


def check_matrix_law(n=1000):
    rng = random.Random(2026)
    bad = 0
    for _ in range(n):
        plan = plan_from_dict(random_plan_dict(rng))
        sweep = len(plan.sweep.values) if plan.sweep else 1
        if len(expand_matrix(plan)) != len(plan.resolved_pairs()) * sweep * plan.repetitions:
            bad += 1
    names = ["lsquic", "quiche", "msquic", "picoquic", "ngtcp2", "quicgo"]
    six = plan_from_dict({"repetitions": 1, "implementations": {
        n: {"client": f"/opt/{n}/c", "server": f"/opt/{n}/s"} for n in names}})
    pairs = len({(s.client.name, s.server.name) for s in expand_matrix(six)})
    return report("matrix law", bad == 0 and pairs == 36,
                  f"{n} random plans, {bad} cardinality violations; 6 implementations -> {pairs} pairs")


def _env():
    hw = HardwareDescriptor("AMD EPYC 7543", 2021, 3.7, 256 * 2**30, "mlx5_core")
    return lambda plan: EnvironmentProbe(
        {"client": HostProbe(hw, "Ubuntu 22.04", "5.15"), "server": HostProbe(hw, "Ubuntu 22.04", "5.15")},
        {impl.name: "1.0" for impl in plan.implementations})


def check_reproducibility(n=1000):
    env = _env()
    rng = random.Random(8)
    same = changed = 0
    for _ in range(n):
        data = random_plan_dict(rng)
        a = plan_from_dict(data)
        b = plan_from_dict(json.loads(json.dumps(data)))
        ra = fingerprint(a, env(a), "2026-01-01T00:00:00+00:00")
        rb = fingerprint(b, env(b), "2026-06-01T00:00:00+00:00")
        same += ra.digest == rb.digest and plan_digest(a) == plan_digest(b)
        _, mutated = _mutations(data, rng)
        m = plan_from_dict(mutated)
        changed += fingerprint(m, env(m), "2026-01-01T00:00:00+00:00").digest != ra.digest
    return report("reproducibility", same == n and changed == n,
                  f"{same}/{n} identical plans gave identical digests, {changed}/{n} single-field mutations changed it")


# ---------------------------------------------------------------------------


def test_acceptance_e2e_loopback(tmp_path):
    assert check_e2e_loopback(tmp_path)


def test_acceptance_goodput_loss_ack_math():
    assert check_goodput_loss_math()


@pytest.mark.slow
def test_acceptance_parser_fixtures_and_fuzz():
    assert check_parser_fixtures()


def test_acceptance_perf_categorization():
    assert check_perf_categorization()


def test_acceptance_statistics_oracle():
    assert check_stats_oracle()


def test_acceptance_tuning_round_trip(tmp_path):
    assert check_tuning_round_trip(tmp_path)


def test_acceptance_matrix_law():
    assert check_matrix_law()


def test_acceptance_reproducibility():
    assert check_reproducibility()


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        results = [
            check_e2e_loopback(Path(d) / "e2e"),
            check_goodput_loss_math(),
            check_parser_fixtures(),
            check_perf_categorization(),
            check_stats_oracle(),
            check_tuning_round_trip(Path(d) / "tuning"),
            check_matrix_law(),
            check_reproducibility(),
        ]
    sys.exit(0 if all(results) else 1)
