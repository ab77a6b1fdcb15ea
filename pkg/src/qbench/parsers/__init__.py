"""Pure parsers turning raw monitoring-tool output into structured metrics."""

from typing import Optional


class ParseError(ValueError):
    """Input is not in the expected format; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line


from .counters import (  # noqa: E402
    CounterDelta,
    CounterMap,
    diff_counters,
    parse_counter_snapshot,
    render_counter_snapshot,
)
from .pcap import DatagramCounts, count_datagrams  # noqa: E402
from .perfscript import PerfSample, parse_perf_script  # noqa: E402
from .pidstat import CpuSample, CpuUtilSeries, parse_pidstat  # noqa: E402
from .qlog import AckStats, count_acks_qlog  # noqa: E402

__all__ = [
    "ParseError",
    "CounterMap",
    "CounterDelta",
    "parse_counter_snapshot",
    "render_counter_snapshot",
    "diff_counters",
    "CpuSample",
    "CpuUtilSeries",
    "parse_pidstat",
    "PerfSample",
    "parse_perf_script",
    "AckStats",
    "count_acks_qlog",
    "DatagramCounts",
    "count_datagrams",
]
