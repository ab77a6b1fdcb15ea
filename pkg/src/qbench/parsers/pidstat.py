"""``pidstat -u`` periodic reports."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

_CPU_COUNT = re.compile(r"\((\d{1,6}) CPU\)")
_TIME = re.compile(r"^\d{1,2}:\d{2}:\d{2}$")
_EPOCH = re.compile(r"^\d{9,12}$")  # ``pidstat -h`` prints seconds since the epoch


@dataclass(frozen=True)
class CpuSample:
    timestamp: str
    pid: int
    command: str
    usr: float
    sys: float
    cpu: float


@dataclass
class CpuUtilSeries:
    samples: list = field(default_factory=list)
    averages: list = field(default_factory=list)
    cpu_count: Optional[int] = None
    skipped_rows: int = 0

    def for_command(self, pattern: str) -> list:
        rx = re.compile(pattern)
        return [s for s in self.samples if rx.search(s.command)]

    def mean_cpu(self, pattern: str = "") -> Optional[float]:
        """Mean %CPU over samples whose command matches ``pattern``."""
        picked = self.for_command(pattern) if pattern else self.samples
        if not picked:
            return None
        return sum(s.cpu for s in picked) / len(picked)


def _time_width(tokens, epoch: bool = False) -> int:
    """Leading tokens forming the timestamp ("12:00:01", "12:00:01 PM" or epoch)."""
    if tokens and epoch and _EPOCH.match(tokens[0]):
        return 1
    if not tokens or not _TIME.match(tokens[0]):
        return 0
    if len(tokens) > 1 and tokens[1] in ("AM", "PM"):
        return 2
    return 1


def _to_float(token: str) -> float:
    return float(token.replace(",", "."))


def parse_pidstat(text) -> CpuUtilSeries:
    """Parse per-process CPU rows.

    Column positions come from each header line, so sysstat versions with or
    without ``%guest``/``%wait`` and 12/24-hour clocks all work.  ``Average:``
    rows are kept apart from the series.  Rows that cannot be read are
    counted in ``skipped_rows``.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    series = CpuUtilSeries()
    header = None
    limit = None
    epoch = False
    for line in text.splitlines():
        tokens = line.split()
        if not tokens:
            continue
        if series.cpu_count is None:
            m = _CPU_COUNT.search(line)
            if m and tokens[0] == "Linux":
                series.cpu_count = int(m.group(1))
                limit = 100.0 * series.cpu_count
                continue
        if tokens[0] == "#":
            # ``pidstat -h`` header: "# Time UID PID %usr ... Command"
            if "Command" in tokens and ("PID" in tokens or "TID" in tokens):
                header = tokens[2:] if len(tokens) > 1 and tokens[1] == "Time" else tokens[1:]
                epoch = True
            continue
        is_avg = tokens[0] == "Average:"
        width = 1 if is_avg else _time_width(tokens, epoch)
        if width == 0:
            if tokens[0] != "Linux":
                series.skipped_rows += 1
            continue
        rest = tokens[width:]
        if "Command" in rest and ("PID" in rest or "TID" in rest):
            header = rest
            continue
        if header is None:
            series.skipped_rows += 1
            continue
        try:
            cols = dict(zip(header[:-1], rest[: len(header) - 1]))
            command = " ".join(rest[len(header) - 1:])
            pid_col = "PID" if "PID" in cols else "TID"
            pid = int(cols[pid_col]) if cols[pid_col] != "-" else -1
            usr = _to_float(cols["%usr"])
            sys_ = _to_float(cols["%system"])
            cpu = _to_float(cols["%CPU"])
        except (KeyError, ValueError):
            series.skipped_rows += 1
            continue
        if not command:
            series.skipped_rows += 1
            continue
        values = (usr, sys_, cpu)
        if any(not math.isfinite(v) or v < 0 for v in values) or (limit is not None and any(v > limit for v in values)):
            series.skipped_rows += 1
            continue
        sample = CpuSample(
            "Average" if is_avg else " ".join(tokens[:width]), pid, command, usr, sys_, cpu
        )
        (series.averages if is_avg else series.samples).append(sample)
    return series
