"""Oracles and synthetic-data generators shared by the tests.

The oracles here deliberately avoid the code under test and the
``statistics`` module it uses.
"""

import json
import math
import random
import string

from qbench.parsers import (
    ParseError,
    count_acks_qlog,
    count_datagrams,
    parse_counter_snapshot,
    parse_perf_script,
    parse_pidstat,
)

# ---------------------------------------------------------------------------
# statistics oracle


def oracle_quantile(values, p):
    """Sort, then interpolate between closest ranks at h = (n - 1) p."""
    xs = sorted(values)
    n = len(xs)
    if n == 1:
        return float(xs[0])
    h = (n - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    frac = h - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


def oracle_summary(values):
    n = len(values)
    mean = math.fsum(values) / n
    if n > 1:
        var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
        sd = math.sqrt(var)
    else:
        sd = 0.0
    return {
        "n": n,
        "mean": mean,
        "median": oracle_quantile(values, 0.5),
        "q1": oracle_quantile(values, 0.25),
        "q3": oracle_quantile(values, 0.75),
        "min": float(min(values)),
        "max": float(max(values)),
        "stdev": sd,
    }


def close(a, b, rel=1e-12, abs_=1e-12):
    return abs(a - b) <= max(rel * max(abs(a), abs(b)), abs_)


def random_vector(rng):
    n = rng.choice([1, 2, 3, 4, 5, rng.randint(6, 60), rng.randint(61, 400)])
    kind = rng.random()
    if kind < 0.3:
        return [rng.uniform(0, 10_000) for _ in range(n)]
    if kind < 0.5:
        return [float(rng.randint(-5, 5)) for _ in range(n)]  # many ties
    if kind < 0.7:
        return [rng.lognormvariate(7, 1.2) for _ in range(n)]
    if kind < 0.85:
        return [rng.gauss(3000, 400) for _ in range(n)]
    return [rng.uniform(-1e6, 1e6) for _ in range(n)]


# ---------------------------------------------------------------------------
# qlog


def qlog_events(ack_sent, other_sent, received, seed=0):
    """Event dicts: ``ack_sent`` packet_sent events carrying an ACK frame,
    ``other_sent`` without one, ``received`` packet_received events."""
    kinds = ["a"] * ack_sent + ["s"] * other_sent + ["r"] * received
    random.Random(seed).shuffle(kinds)
    events = []
    for i, k in enumerate(kinds):
        t = i * 0.01
        if k == "a":
            frames = [{"frame_type": "ack", "acked_ranges": [[0, i]]}]
            events.append({"time": t, "name": "transport:packet_sent", "data": {"frames": frames}})
        elif k == "s":
            frames = [{"frame_type": "stream", "stream_id": 0, "length": 1200}]
            events.append({"time": t, "name": "transport:packet_sent", "data": {"frames": frames}})
        else:
            frames = [{"frame_type": "stream", "stream_id": 0, "length": 1200}]
            events.append({"time": t, "name": "transport:packet_received", "data": {"frames": frames}})
    return events


def qlog_ndjson(events):
    header = json.dumps({"qlog_version": "0.3", "qlog_format": "JSON-SEQ", "trace": {"vantage_point": {"type": "client"}}})
    return "\n".join([header, *(json.dumps(e, separators=(",", ":")) for e in events)]) + "\n"


def qlog_json(events):
    return json.dumps({"qlog_version": "0.3", "traces": [{"vantage_point": {"type": "client"}, "events": events}]})


# ---------------------------------------------------------------------------
# perf


def perf_dump(samples):
    """``perf script`` text for ``(command, pid, [frames leaf first])`` tuples."""
    out = []
    for i, (comm, pid, frames) in enumerate(samples):
        out.append(f"{comm} {pid} [{i % 8:03d}] {1000 + i * 0.01:.6f}: 10101010 cycles: ")
        for j, sym in enumerate(frames):
            out.append(f"\t{0xffff0000 + j:x} {sym}+0x{j * 16 + 4:x} ([kernel.kallsyms])")
        out.append("")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# fuzzing

PARSERS = {
    "ethtool": lambda b: parse_counter_snapshot(b, "ethtool"),
    "netstat": lambda b: parse_counter_snapshot(b, "netstat"),
    "pidstat": parse_pidstat,
    "perf": parse_perf_script,
    "qlog": count_acks_qlog,
    "pcap": lambda b: count_datagrams(b, "10.0.0.2", 4433),
}

_TOKENS = [
    "NIC statistics:", "rx_dropped", ":", " ", "\t", "\n", "Udp:", "packets received", "7000",
    "Average:", "12:00:01", "PM", "PID", "%CPU", "Command", "%usr", "%system", "Linux", "(8 CPU)", "#",
    "cycles:", "[003]", "81234.1:", "ffffffff8a1b2c30", "sendmsg+0x10", "([kernel.kallsyms])", "[unknown]",
    "{", "}", "[", "]", '"traces"', '"events"', '"name"', '"packet_sent"', '"frames"', '"frame_type"',
    '"ack"', ",", "\x1e", "nan", "inf", "-1", "99999999999999999999999999", "é", "\x00",
]

_PCAP_HEADERS = [
    bytes.fromhex("d4c3b2a1020004000000000000000000ffff000001000000"),
    bytes.fromhex("a1b2c3d4000200040000000000000000 0000ffff00000071".replace(" ", "")),
    bytes.fromhex("4d3cb2a1020004000000000000000000ffff000065000000"),
]


def _mutate(data: bytes, rng) -> bytes:
    b = bytearray(data)
    for _ in range(rng.randint(1, 8)):
        op = rng.random()
        if not b or op < 0.3:
            b[rng.randint(0, len(b)):rng.randint(0, len(b))] = bytes(rng.getrandbits(8) for _ in range(rng.randint(1, 6)))
        elif op < 0.6:
            b[rng.randrange(len(b))] = rng.getrandbits(8)
        elif op < 0.8:
            i = rng.randrange(len(b))
            del b[i:i + rng.randint(1, 16)]
        else:
            i = rng.randrange(len(b))
            b[i:i] = b[max(0, i - 32):i]
    return bytes(b)


def fuzz_input(rng, seeds):
    r = rng.random()
    if r < 0.2:
        return bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 96)))
    if r < 0.45:
        return "".join(rng.choice(_TOKENS) for _ in range(rng.randint(0, 40))).encode("utf-8", "surrogatepass")
    if r < 0.55:
        return "".join(rng.choice(string.printable) for _ in range(rng.randint(0, 80))).encode()
    if r < 0.7:
        body = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 80)))
        return _mutate(rng.choice(_PCAP_HEADERS) + body, rng) if rng.random() < 0.5 else rng.choice(_PCAP_HEADERS) + body
    seed = rng.choice(seeds)
    start = rng.randrange(max(1, len(seed) - 600))
    return _mutate(seed[start:start + rng.randint(0, 600)], rng)


def run_fuzz(n, seeds, seed=1234):
    """Feed ``n`` random inputs to every parser; returns (inputs, crashes).

    A parser may return a value or raise ParseError; anything else is a crash.
    """
    rng = random.Random(seed)
    crashes = []
    for i in range(n):
        blob = fuzz_input(rng, seeds)
        for name, parse in PARSERS.items():
            arg = blob if name in ("pcap",) or rng.random() < 0.5 else blob.decode("utf-8", "replace")
            try:
                parse(arg)
            except ParseError:
                pass
            except Exception as exc:  # noqa: BLE001
                crashes.append((name, i, repr(exc)[:200], blob[:200]))
    return n, crashes


# ---------------------------------------------------------------------------
# plans


def random_plan_dict(rng):
    names = rng.sample(["lsquic", "quiche", "msquic", "picoquic", "ngtcp2", "quicgo", "mvfst", "xquic"],
                       rng.randint(1, 6))
    impls = {}
    for k, n in enumerate(names):
        role = "both" if k == 0 else rng.choice(["both", "both", "client", "server"])
        d = {"role": role}
        if role in ("both", "client"):
            d["client"] = f"/opt/{n}/client.sh"
        if role in ("both", "server"):
            d["server"] = f"/opt/{n}/server.sh"
        impls[n] = d
    data = {
        "repetitions": rng.randint(1, 12),
        "transfer_size": rng.randint(1, 10**10),
        "implementations": impls,
    }
    clients = [n for n, d in impls.items() if d["role"] in ("both", "client")]
    servers = [n for n, d in impls.items() if d["role"] in ("both", "server")]
    if rng.random() < 0.5 or not clients or not servers:
        data["pairs"] = "all-pairs"
    else:
        k = rng.randint(1, 5)
        data["pairs"] = [[rng.choice(clients), rng.choice(servers)] for _ in range(k)]
    s = rng.random()
    if s < 0.25:
        vals = sorted(rng.sample([0.5, 1, 2, 4, 8, 16, 32, 64], rng.randint(1, 8)))
        data["sweep"] = {"knob": "udp_rcvbuf_multiple", "values": vals}
    elif s < 0.4:
        data["sweep"] = {"knob": "offload_profile", "values": rng.sample(["none", "gso", "gso+gro", "all"], rng.randint(1, 4))}
    elif s < 0.55:
        data["sweep"] = {"knob": "cipher_scenario", "values": rng.sample(["default", "force-aes", "force-chacha20"], rng.randint(1, 3))}
    return data
