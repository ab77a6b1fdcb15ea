"""Turn an artifact tree written by ``qbench run`` into parsed tables.

Layout::

    <out>/plan.toml
    <out>/provenance.json
    <out>/runs/<measurement id>/spec.json
    <out>/runs/<measurement id>/artifacts.json
    <out>/runs/<measurement id>/<client|server>/<collector>/<blob>
    <out>/runs/<measurement id>/<client|server>/logs/

Parsing writes ``results.csv``, ``results.json`` and ``categories.csv`` next
to them and never touches the raw files, so it can be re-run at will.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .analysis import ParsedMetrics, ResultsTable, build_results_table
from .parsers import ParseError, count_acks_qlog, diff_counters, parse_counter_snapshot, parse_perf_script, parse_pidstat
from .parsers.counters import DELIVERED_ALIASES, RCVBUF_DROP_ALIASES, RING_DROP_ALIASES
from .perfcat import Category, category_breakdown, load_rules
from .plan import load_plan

logger = logging.getLogger(__name__)

RESULTS_CSV = "results.csv"
RESULTS_JSON = "results.json"
CATEGORIES_CSV = "categories.csv"
CATEGORY_HEADER = ["measurement_id", "role", "implementation", "rules", "category", "samples",
                   "total_samples", "fraction", "process_fraction"]
RULES_NOTE = "shipped rule files are best-effort reconstructions of a manual mapping"


@dataclass
class ParseOutcome:
    table: ResultsTable
    categories: list = field(default_factory=list)  # rows matching CATEGORY_HEADER
    warnings: list = field(default_factory=list)


def _read(path: Path) -> Optional[str]:
    try:
        return path.read_text(errors="replace")
    except OSError:
        return None


def _counter_delta(role_dir: Path, kind: str, warnings: list, mid: str):
    before = _read(role_dir / kind / "before.txt")
    after = _read(role_dir / kind / "after.txt")
    if not before or not after:
        return None
    try:
        return diff_counters(parse_counter_snapshot(before, kind), parse_counter_snapshot(after, kind))
    except ParseError as exc:
        warnings.append(f"{mid}: {kind}: {exc}")
        return None


def _cpu(role_dir: Path, pattern: Optional[str], warnings: list, mid: str) -> Optional[float]:
    text = _read(role_dir / "pidstat" / "stdout")
    if not text or not pattern:
        return None
    series = parse_pidstat(text)
    if series.skipped_rows:
        warnings.append(f"{mid}: pidstat: skipped {series.skipped_rows} malformed row(s)")
    return series.mean_cpu(pattern)


def parse_run(run_dir: Path, plan=None, warnings: Optional[list] = None) -> ParsedMetrics:
    """Metrics of one measurement from its raw outputs; absent tools give None."""
    warnings = warnings if warnings is not None else []
    run_dir = Path(run_dir)
    spec = json.loads((run_dir / "spec.json").read_text())
    mid = spec["measurement_id"]
    client_dir = run_dir / "client"
    values = {}

    netstat = _counter_delta(client_dir, "netstat", warnings, mid)
    if netstat is not None:
        values["rcvbuf_drops"] = netstat.first(RCVBUF_DROP_ALIASES)
        values["delivered_datagrams"] = netstat.first(DELIVERED_ALIASES)
    ethtool = _counter_delta(client_dir, "ethtool", warnings, mid)
    if ethtool is not None:
        values["ring_drops"] = ethtool.first(RING_DROP_ALIASES)

    qdir = client_dir / "qlog"
    if qdir.is_dir():
        blobs = [p.read_bytes() for p in sorted(qdir.rglob("*")) if p.is_file() and p.name not in ("FAILED",)]
        if blobs:
            try:
                acks = count_acks_qlog(blobs)
                values.update(
                    client_acks_sent=acks.ack_frames_sent,
                    client_packets_sent=acks.packets_sent,
                    client_packets_received=acks.packets_received,
                )
            except ParseError as exc:
                warnings.append(f"{mid}: qlog: {exc}")

    for role in ("client", "server"):
        impl = _impl(plan, spec[role])
        pattern = impl.process_pattern if impl is not None else None
        values[f"{role}_cpu"] = _cpu(run_dir / role, pattern, warnings, mid)
    return ParsedMetrics(**values)


def _impl(plan, name):
    if plan is None:
        return None
    try:
        return plan.implementation(name)
    except KeyError:
        return None


def _rules_for(impl, cache: dict):
    name = impl.perf_rules or impl.name
    if name not in cache:
        try:
            cache[name] = load_rules(name)
        except FileNotFoundError:
            cache[name] = None
    return cache[name]


def categorize_run(run_dir: Path, plan, warnings: list, cache: Optional[dict] = None) -> list:
    """Category rows for every host with a finalized perf dump."""
    cache = {} if cache is None else cache
    spec = json.loads((Path(run_dir) / "spec.json").read_text())
    rows = []
    for role in ("client", "server"):
        text = _read(Path(run_dir) / role / "perf" / "finalized.txt")
        impl = _impl(plan, spec[role])
        if not text or impl is None:
            continue
        rules = _rules_for(impl, cache)
        if rules is None:
            warnings.append(f"{spec['measurement_id']}: no perf rules for {impl.name}")
            continue
        try:
            samples = parse_perf_script(text)
        except ParseError as exc:
            warnings.append(f"{spec['measurement_id']}: perf: {exc}")
            continue
        b = category_breakdown(samples, rules, impl.process_pattern or "")
        for c in Category:
            rows.append([spec["measurement_id"], role, impl.name, rules.implementation, c.value, b.counts[c],
                         b.total_samples, float(b.fraction(c)), float(b.process_fraction(c))])
    return rows


def run_dirs(out_dir: Path) -> list:
    runs = Path(out_dir) / "runs"
    if not runs.is_dir():
        return []
    return sorted(d for d in runs.iterdir() if (d / "spec.json").is_file())


def parse_tree(out_dir, write: bool = True) -> ParseOutcome:
    """Parse every run under ``out_dir``; write the tables unless ``write`` is False."""
    out_dir = Path(out_dir)
    dirs = run_dirs(out_dir)
    if not dirs:
        raise FileNotFoundError(f"no measurement directories under {out_dir / 'runs'}")
    plan = load_plan(out_dir / "plan.toml") if (out_dir / "plan.toml").is_file() else None
    digest = None
    prov = _read(out_dir / "provenance.json")
    if prov:
        digest = json.loads(prov).get("plan_digest")

    warnings = []
    runs = []
    categories = []
    cache = {}
    for d in dirs:
        spec = json.loads((d / "spec.json").read_text())
        art_text = _read(d / "artifacts.json")
        art = json.loads(art_text) if art_text else {"verdict": "missing"}
        runs.append((spec, art, parse_run(d, plan, warnings)))
        categories.extend(categorize_run(d, plan, warnings, cache))
    table = build_results_table(runs, digest)
    if categories:
        table.metadata["perf_rules"] = RULES_NOTE
    for w in warnings:
        logger.warning(w)
    outcome = ParseOutcome(table, categories, warnings)
    if write:
        (out_dir / RESULTS_CSV).write_text(table.to_csv())
        (out_dir / RESULTS_JSON).write_text(table.to_json())
        (out_dir / CATEGORIES_CSV).write_text(render_categories(categories))
    return outcome


def render_categories(rows, delimiter: str = ",") -> str:
    buf = io.StringIO()
    buf.write(f"# note: {RULES_NOTE}\n# fraction: samples / all samples on the host (idle included)\n")
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(CATEGORY_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def read_categories(text: str) -> list:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader)


def aggregate_categories(rows) -> list:
    """Mean fraction per (role, implementation, category) across runs."""
    groups = {}
    for r in rows:
        r = dict(zip(CATEGORY_HEADER, r)) if isinstance(r, (list, tuple)) else r
        key = (r["role"], r["implementation"], r["category"])
        groups.setdefault(key, []).append(float(r["fraction"]))
    order = {c.value: i for i, c in enumerate(Category)}
    out = []
    for (role, impl, cat), fr in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], order[kv[0][2]])):
        out.append([role, impl, cat, len(fr), sum(fr) / len(fr)])
    return out
