import dataclasses
import json
from pathlib import Path

import pytest

from qbench.parsers import (
    count_acks_qlog,
    count_datagrams,
    parse_counter_snapshot,
    parse_perf_script,
    parse_pidstat,
)

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# fixture file -> how to parse it; golden/<stem>.json holds the expected result
PARSE_CASES = {
    "ethtool_S.txt": lambda p: dict(parse_counter_snapshot(p.read_text(), "ethtool").counters),
    "netstat_su.txt": lambda p: dict(parse_counter_snapshot(p.read_text(), "netstat").counters),
    "pidstat.txt": lambda p: _plain(parse_pidstat(p.read_text())),
    "pidstat_h.txt": lambda p: _plain(parse_pidstat(p.read_text())),
    "perf_script.txt": lambda p: _plain(parse_perf_script(p.read_text())),
    "capture.pcap": lambda p: {
        "server_v4": _plain(count_datagrams(p.read_bytes(), "10.0.0.2", 4433)),
        "any_4433": _plain(count_datagrams(p.read_bytes(), None, 4433)),
        "server_v6": _plain(count_datagrams(p.read_bytes(), "fd00::2", 4433)),
    },
    "qlog_trace.qlog": lambda p: _plain(count_acks_qlog(p.read_text())),
    "qlog_stream.sqlog": lambda p: _plain(count_acks_qlog(p.read_text())),
}


def parse_fixture(name):
    # JSON round trip so tuples and lists compare equal to the stored golden
    return json.loads(json.dumps(PARSE_CASES[name](FIXTURES / name)))


def golden(name):
    return json.loads((GOLDEN / (Path(name).stem + ".json")).read_text())


@pytest.fixture
def fixtures_dir():
    return FIXTURES
