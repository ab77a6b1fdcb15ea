"""Goodput, loss and summary statistics over many runs.

Units are SI throughout (bytes, seconds, Mbit/s = 10**6 bit/s); only socket
buffer sizes are binary (see :mod:`qbench.tuning`).
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Optional

QUARTILE_METHOD = "linear interpolation between closest ranks (type 7)"
LOSS_DEFINITION = "dropped / (dropped + delivered)"
ACK_SOURCE = "qlog packet_sent events carrying an ack frame"

OK = "ok"


def goodput(nbytes: int, duration: float) -> float:
    """Mbit/s for ``nbytes`` transferred in ``duration`` seconds."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration!r}")
    if nbytes < 0:
        raise ValueError(f"byte count must be non-negative, got {nbytes!r}")
    return nbytes * 8 / duration / 1e6


def loss_rate(dropped: int, delivered: int) -> Optional[float]:
    """Fraction of datagrams dropped; None when nothing was seen at all."""
    if dropped < 0 or delivered < 0:
        raise ValueError("counts must be non-negative")
    if dropped + delivered == 0:
        return None
    return dropped / (dropped + delivered)


def ack_reduction(acks_before: int, acks_after: int) -> Fraction:
    """Exact ratio of ACK-bearing packets after a change to before it."""
    if acks_before <= 0:
        raise ValueError("baseline ACK count must be positive")
    return Fraction(acks_after, acks_before)


@dataclass(frozen=True)
class StatsSummary:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float
    stdev: float


def summarize(values) -> StatsSummary:
    """Five-number summary plus mean and sample standard deviation."""
    data = sorted(float(v) for v in values)
    if not data:
        raise ValueError("cannot summarize an empty sample")
    if any(not math.isfinite(v) for v in data):
        raise ValueError("sample contains non-finite values")
    n = len(data)
    if n == 1:
        v = data[0]
        return StatsSummary(1, v, v, v, v, v, v, 0.0)
    q1, median, q3 = statistics.quantiles(data, n=4, method="inclusive")
    # guard the ordering against one-ulp interpolation artefacts
    q1 = min(max(q1, data[0]), median)
    q3 = max(min(q3, data[-1]), median)
    return StatsSummary(n, statistics.fmean(data), median, q1, q3, data[0], data[-1], statistics.stdev(data))


# ---------------------------------------------------------------------------
# results table


@dataclass(frozen=True)
class ParsedMetrics:
    """Metrics extracted from one run's raw tool outputs (all optional)."""

    rcvbuf_drops: Optional[int] = None
    ring_drops: Optional[int] = None
    delivered_datagrams: Optional[int] = None
    client_acks_sent: Optional[int] = None
    client_packets_sent: Optional[int] = None
    client_packets_received: Optional[int] = None
    client_cpu: Optional[float] = None
    server_cpu: Optional[float] = None


@dataclass(frozen=True)
class RunRecord:
    measurement_id: str
    index: int
    client: str
    server: str
    knob: Optional[str]
    knob_value: Optional[str]
    repetition: int
    transfer_bytes: int
    duration_s: Optional[float]
    duration_source: Optional[str]
    goodput_mbps: Optional[float]
    verdict: str
    rcvbuf_drops: Optional[int] = None
    ring_drops: Optional[int] = None
    delivered_datagrams: Optional[int] = None
    loss_rate: Optional[float] = None
    client_acks_sent: Optional[int] = None
    client_packets_sent: Optional[int] = None
    client_packets_received: Optional[int] = None
    client_cpu: Optional[float] = None
    server_cpu: Optional[float] = None
    provenance_digest: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.verdict == OK


_INT = int
_FLOAT = float
_STR = str
COLUMN_TYPES = {
    "measurement_id": _STR, "index": _INT, "client": _STR, "server": _STR,
    "knob": _STR, "knob_value": _STR, "repetition": _INT, "transfer_bytes": _INT,
    "duration_s": _FLOAT, "duration_source": _STR, "goodput_mbps": _FLOAT, "verdict": _STR,
    "rcvbuf_drops": _INT, "ring_drops": _INT, "delivered_datagrams": _INT, "loss_rate": _FLOAT,
    "client_acks_sent": _INT, "client_packets_sent": _INT, "client_packets_received": _INT,
    "client_cpu": _FLOAT, "server_cpu": _FLOAT, "provenance_digest": _STR,
}
COLUMNS = tuple(f.name for f in fields(RunRecord))
assert set(COLUMNS) == set(COLUMN_TYPES)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _uncell(text: str, kind):
    if text == "":
        return None
    return kind(text)


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.measurement_id in seen:
                raise ValueError(f"duplicate measurement id {r.measurement_id!r}")
            seen.add(r.measurement_id)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def to_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        for key, value in sorted(self.metadata.items()):
            buf.write(f"# {key}: {value}\n")
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_cell(getattr(r, c)) for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, delimiter: str = ",") -> "ResultsTable":
        metadata = {}
        body = []
        for line in text.splitlines(keepends=True):
            if line.startswith("# ") and not body:
                key, _, value = line[2:].rstrip("\n").partition(": ")
                metadata[key] = value
            else:
                body.append(line)
        reader = csv.reader(io.StringIO("".join(body)), delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            return cls([], metadata)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected results header: {header}")
        rows = [RunRecord(**{c: _uncell(v, COLUMN_TYPES[c]) for c, v in zip(header, rec)}) for rec in reader if rec]
        return cls(rows, metadata)

    def to_records(self) -> list:
        return [asdict(r) for r in self.rows]

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "columns": list(COLUMNS), "rows": self.to_records()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ResultsTable":
        doc = json.loads(text)
        return cls([RunRecord(**r) for r in doc["rows"]], doc.get("metadata", {}))


def _knob_text(value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return str(value)


def build_results_table(runs, provenance_digest: Optional[str] = None) -> ResultsTable:
    """One row per run, in matrix order.

    ``runs`` holds ``(spec, artifacts, metrics)`` triples where ``spec`` and
    ``artifacts`` are dicts as written to disk (or objects with ``to_dict``)
    and ``metrics`` is a :class:`ParsedMetrics` (or None).  Failed runs keep
    their row with no goodput.
    """
    rows = []
    for spec, art, metrics in runs:
        spec = spec.to_dict() if hasattr(spec, "to_dict") else spec
        art = art.to_dict() if hasattr(art, "to_dict") else art
        metrics = metrics or ParsedMetrics()
        verdict = art.get("verdict") or "missing"
        duration = art.get("duration_s")
        size = spec["transfer_size"]
        ok = verdict == OK and duration is not None and duration > 0
        knob = spec.get("knob")
        lr = None
        if metrics.rcvbuf_drops is not None and metrics.delivered_datagrams is not None:
            lr = loss_rate(max(metrics.rcvbuf_drops, 0), max(metrics.delivered_datagrams, 0))
        rows.append(
            RunRecord(
                measurement_id=spec["measurement_id"],
                index=spec["index"],
                client=spec["client"],
                server=spec["server"],
                knob=knob[0] if knob else None,
                knob_value=_knob_text(knob[1]) if knob else None,
                repetition=spec["repetition_index"],
                transfer_bytes=size,
                duration_s=float(duration) if duration is not None else None,
                duration_source=art.get("duration_source"),
                goodput_mbps=goodput(size, float(duration)) if ok else None,
                verdict=verdict if ok or verdict != OK else "missing",
                rcvbuf_drops=metrics.rcvbuf_drops,
                ring_drops=metrics.ring_drops,
                delivered_datagrams=metrics.delivered_datagrams,
                loss_rate=lr,
                client_acks_sent=metrics.client_acks_sent,
                client_packets_sent=metrics.client_packets_sent,
                client_packets_received=metrics.client_packets_received,
                client_cpu=metrics.client_cpu,
                server_cpu=metrics.server_cpu,
                provenance_digest=provenance_digest,
            )
        )
    rows.sort(key=lambda r: r.index)
    table = ResultsTable(rows)
    table.metadata.update(
        {"quartiles": QUARTILE_METHOD, "loss_rate": LOSS_DEFINITION, "acks": ACK_SOURCE, "goodput_unit": "Mbit/s (SI)"}
    )
    return table


# ---------------------------------------------------------------------------
# reports


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return statistics.fmean(values) if values else None


@dataclass
class GroupSummary:
    client: str
    server: str
    knob_value: Optional[str]
    goodput: Optional[StatsSummary]
    n_ok: int
    n_failed: int
    mean_rcvbuf_drops: Optional[float] = None
    mean_loss_rate: Optional[float] = None
    mean_client_acks_sent: Optional[float] = None
    mean_client_cpu: Optional[float] = None
    mean_server_cpu: Optional[float] = None


def _summarize_group(client, server, knob_value, rows) -> GroupSummary:
    good = [r for r in rows if r.ok and r.goodput_mbps is not None]
    return GroupSummary(
        client=client,
        server=server,
        knob_value=knob_value,
        goodput=summarize([r.goodput_mbps for r in good]) if good else None,
        n_ok=len(good),
        n_failed=len(rows) - len(good),
        mean_rcvbuf_drops=_mean(r.rcvbuf_drops for r in good),
        mean_loss_rate=_mean(r.loss_rate for r in good),
        mean_client_acks_sent=_mean(r.client_acks_sent for r in good),
        mean_client_cpu=_mean(r.client_cpu for r in good),
        mean_server_cpu=_mean(r.server_cpu for r in good),
    )


def _knob_sort_key(values):
    try:
        nums = {v: float(v) for v in values}
    except (TypeError, ValueError):
        order = {v: i for i, v in enumerate(values)}
        return lambda v: order[v]
    return lambda v: nums[v]


@dataclass
class SweepReport:
    knob: str
    groups: list

    def for_pair(self, client: str, server: str) -> list:
        return [g for g in self.groups if (g.client, g.server) == (client, server)]


def sweep_report(table: ResultsTable, knob: str) -> SweepReport:
    """Goodput summary per (pair, knob value), knob values in ascending order."""
    rows = [r for r in table.rows if r.knob == knob]
    if not rows:
        raise KeyError(f"no rows carry knob {knob!r}")
    pairs = list(dict.fromkeys((r.client, r.server) for r in rows))
    values = list(dict.fromkeys(r.knob_value for r in rows))
    values.sort(key=_knob_sort_key(values))
    groups = []
    for client, server in pairs:
        for v in values:
            g = [r for r in rows if (r.client, r.server, r.knob_value) == (client, server, v)]
            if g:
                groups.append(_summarize_group(client, server, v, g))
    return SweepReport(knob, groups)


@dataclass
class MatrixReport:
    clients: list
    servers: list
    cells: dict  # (client, server) -> GroupSummary

    def cell(self, client: str, server: str) -> Optional[GroupSummary]:
        return self.cells.get((client, server))


def matrix_report(table: ResultsTable) -> MatrixReport:
    """Client x server grid of goodput summaries (all knob values pooled)."""
    clients = list(dict.fromkeys(r.client for r in table.rows))
    servers = list(dict.fromkeys(r.server for r in table.rows))
    cells = {}
    for c in clients:
        for s in servers:
            g = [r for r in table.rows if (r.client, r.server) == (c, s)]
            if g:
                cells[(c, s)] = _summarize_group(c, s, None, g)
    return MatrixReport(clients, servers, cells)


_SUMMARY_FIELDS = ("n", "mean", "median", "q1", "q3", "min", "max", "stdev")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}" if abs(v) < 1e6 else f"{v:.1f}"
    return str(v)


def _write(rows, header, delimiter, metadata=None) -> str:
    buf = io.StringIO()
    for k, v in (metadata or {}).items():
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _group_row(g: GroupSummary) -> list:
    stats = [getattr(g.goodput, f) if g.goodput else None for f in _SUMMARY_FIELDS]
    return [g.client, g.server, g.knob_value, *stats, g.n_failed, g.mean_rcvbuf_drops,
            g.mean_loss_rate, g.mean_client_acks_sent, g.mean_client_cpu, g.mean_server_cpu]


_GROUP_HEADER = ["client", "server", "knob_value", *(f"goodput_{f}" for f in _SUMMARY_FIELDS), "failed",
                 "mean_rcvbuf_drops", "mean_loss_rate", "mean_client_acks_sent", "mean_client_cpu", "mean_server_cpu"]


def render_sweep(report: SweepReport, delimiter: str = ",") -> str:
    rows = [[_fmt(v) for v in _group_row(g)] for g in report.groups]
    meta = {"knob": report.knob, "quartiles": QUARTILE_METHOD, "loss_rate": LOSS_DEFINITION, "acks": ACK_SOURCE}
    return _write(rows, _GROUP_HEADER, delimiter, meta)


def render_matrix(report: MatrixReport, delimiter: str = ",", stat: str = "median") -> str:
    """Grid with clients as rows and servers as columns, one statistic per cell."""
    rows = []
    for c in report.clients:
        row = [c]
        for s in report.servers:
            g = report.cell(c, s)
            row.append(_fmt(getattr(g.goodput, stat)) if g and g.goodput else "")
        rows.append(row)
    meta = {"cell": f"goodput {stat} [Mbit/s]", "rows": "client", "columns": "server", "quartiles": QUARTILE_METHOD}
    return _write(rows, ["client\\server", *report.servers], delimiter, meta)


def render_matrix_long(report: MatrixReport, delimiter: str = ",") -> str:
    rows = [[_fmt(v) for v in _group_row(g)] for g in report.cells.values()]
    return _write(rows, _GROUP_HEADER, delimiter, {"quartiles": QUARTILE_METHOD})


PLOT_HEADER = ["series", "x", "y", "q1", "q3", "mean", "median", "min", "max", "n"]


def plot_series_sweep(report: SweepReport) -> list:
    """Boxplot-ready rows: one series per pair, x = knob value."""
    out = []
    for g in report.groups:
        if g.goodput is None:
            continue
        s = g.goodput
        out.append([f"{g.client}->{g.server}", g.knob_value, s.median, s.q1, s.q3, s.mean, s.median, s.min, s.max, s.n])
    return out


def plot_series_matrix(report: MatrixReport) -> list:
    """Boxplot-ready rows: one series per client, x = server."""
    out = []
    for (c, srv), g in report.cells.items():
        if g.goodput is None:
            continue
        s = g.goodput
        out.append([c, srv, s.median, s.q1, s.q3, s.mean, s.median, s.min, s.max, s.n])
    return out


def render_plot_series(rows, delimiter: str = ",") -> str:
    return _write([[_fmt(v) for v in r] for r in rows], PLOT_HEADER, delimiter)
