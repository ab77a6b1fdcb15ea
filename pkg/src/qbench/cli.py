"""``qbench`` command line.

Exit codes: 0 all requested work succeeded, 1 at least one measurement
failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import (
    ResultsTable,
    matrix_report,
    plot_series_matrix,
    plot_series_sweep,
    render_matrix,
    render_matrix_long,
    render_plot_series,
    render_sweep,
    sweep_report,
)
from .executor import ExecutorError, LocalExecutor, make_executor
from .orchestrator import RunOptions, run_measurement
from .perfcat import load_rules
from .pipeline import CATEGORIES_CSV, RESULTS_CSV, aggregate_categories, parse_tree, read_categories
from .plan import COLLECTOR_IDS, PlanError, expand_matrix, load_plan, plan_digest
from .provenance import EnvironmentProbe, fingerprint, probe_host, probe_versions

logger = logging.getLogger("qbench")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
STYLES = ("matrix", "sweep", "categories")


class UsageError(Exception):
    pass


def _collectors(text, plan):
    if text is None:
        return set(plan.collectors)
    ids = {c.strip() for c in text.split(",") if c.strip()}
    unknown = ids - COLLECTOR_IDS
    if unknown:
        raise UsageError(f"unknown collector(s): {', '.join(sorted(unknown))}")
    return ids


def _executor(spec, simulate: bool):
    if simulate:
        if spec not in (None, "local", "localhost", "127.0.0.1", "loopback"):
            raise UsageError("--simulate-host-tools only works with local hosts")
        from .testing import SimulatedExecutor

        return SimulatedExecutor(host="localhost")
    return make_executor(spec)


def _server_addr(args, server_exec):
    if args.server_addr:
        return args.server_addr
    if isinstance(server_exec, LocalExecutor):
        return "127.0.0.1"
    return server_exec.host.rsplit("@", 1)[-1]


def _load(args):
    try:
        return load_plan(args.plan)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except PlanError as exc:
        raise UsageError(f"invalid plan: {exc}") from None


def _hosts(args):
    client = _executor(args.client_host, args.simulate_host_tools)
    server = client if args.server_host == args.client_host and args.simulate_host_tools else \
        _executor(args.server_host, args.simulate_host_tools)
    return client, server


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(args) -> int:
    plan = _load(args)
    specs = expand_matrix(plan)
    print(f"plan ok: {len(plan.implementations)} implementation(s), {len(plan.resolved_pairs())} pair(s), "
          f"{len(specs)} measurement(s), digest {plan_digest(plan)[:16]}")
    client, server = _hosts(args)
    status = EXIT_OK
    for role, e in (("client", client), ("server", server)):
        if not e.reachable():
            print(f"{role} host {e.host}: unreachable", file=sys.stderr)
            status = EXIT_USAGE
        else:
            print(f"{role} host {e.host}: reachable")
    for impl in plan.implementations:
        if impl.perf_rules:
            try:
                load_rules(impl.perf_rules)
            except (FileNotFoundError, ValueError) as exc:
                print(f"perf rules for {impl.name}: {exc}", file=sys.stderr)
                status = EXIT_USAGE
    return status


def cmd_matrix(args) -> int:
    plan = _load(args)
    for spec in expand_matrix(plan):
        knob = f"{spec.knob[0]}={spec.knob[1]}" if spec.knob else "-"
        print(f"{spec.measurement_id}\t{spec.client.name}\t{spec.server.name}\t{knob}\t{spec.repetition_index}")
    return EXIT_OK


def _rule_digests(plan) -> dict:
    digests = {}
    for impl in plan.implementations:
        try:
            rules = load_rules(impl.perf_rules or impl.name)
        except (FileNotFoundError, ValueError):
            continue
        digests[impl.name] = rules.source_digest
    return digests


def cmd_run(args) -> int:
    plan = _load(args)
    collectors = _collectors(args.collectors, plan)
    out = Path(args.out)
    runs_dir = out / "runs"
    if runs_dir.exists() and any(runs_dir.iterdir()) and not args.force:
        raise UsageError(f"{runs_dir} already holds measurements; use --force or another --out")
    client, server = _hosts(args)
    for role, e in (("client", client), ("server", server)):
        if not e.reachable():
            raise UsageError(f"{role} host {e.host} is unreachable")

    out.mkdir(parents=True, exist_ok=True)
    if runs_dir.exists() and args.force:
        shutil.rmtree(runs_dir)
    runs_dir.mkdir()
    shutil.copyfile(args.plan, out / "plan.toml")

    env = EnvironmentProbe(
        hosts={"client": probe_host(client, plan.host_tuning.interface_name),
               "server": probe_host(server, plan.host_tuning.interface_name)},
        versions=probe_versions(plan, client, server),
        rule_digests=_rule_digests(plan),
    )
    record = fingerprint(plan, env)
    doc = record.to_dict()
    doc["record_digest"] = record.digest
    (out / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    if record.incomplete:
        logger.warning("no version for: %s", ", ".join(record.incomplete))

    options = RunOptions(
        server_addr=_server_addr(args, server),
        port=args.port,
        readiness_grace=args.grace,
        tuning_commands=plan.tuning_commands,
        keep_workdirs=args.keep_workdirs,
    )
    specs = expand_matrix(plan)
    failed = 0
    t0 = time.monotonic()
    for i, spec in enumerate(specs, 1):
        art = run_measurement(spec, client, server, collectors, runs_dir / spec.measurement_id, options)
        ok = art.verdict == "ok" and art.tuning_restored is not False
        failed += not ok
        rate = ""
        if art.verdict == "ok" and art.duration_s:
            rate = f" {spec.transfer_size * 8 / art.duration_s / 1e6:.1f} Mbit/s"
        print(f"[{i}/{len(specs)}] {spec.measurement_id}: {art.verdict}{rate}" + (f" ({art.error})" if art.error else ""))
    print(f"{len(specs) - failed} ok, {failed} failed in {time.monotonic() - t0:.1f} s; artifacts in {out}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_parse(args) -> int:
    try:
        outcome = parse_tree(args.out)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    for w in outcome.warnings:
        print(f"warning: {w}", file=sys.stderr)
    bad = sum(1 for r in outcome.table.rows if not r.ok)
    print(f"parsed {len(outcome.table)} run(s) ({bad} not ok) into {Path(args.out) / RESULTS_CSV}")
    return EXIT_OK


def _table(out: Path) -> ResultsTable:
    path = out / RESULTS_CSV
    if not path.is_file():
        parse_tree(out)
    return ResultsTable.from_csv(path.read_text())


def cmd_report(args) -> int:
    out = Path(args.out)
    try:
        if args.style == "categories":
            path = out / CATEGORIES_CSV
            if not path.is_file():
                parse_tree(out)
            rows = aggregate_categories(read_categories(path.read_text()))
            if not rows:
                print("no perf samples in this artifact tree (enable the perf collector)", file=sys.stderr)
                return EXIT_FAILED
            text = "role,implementation,category,runs,mean_fraction\n" + "".join(
                f"{r},{i},{c},{n},{f:.6g}\n" for r, i, c, n, f in rows)
            series = ""
        else:
            table = _table(out)
            if args.style == "matrix":
                rep = matrix_report(table)
                text = render_matrix(rep, stat=args.stat) + "\n" + render_matrix_long(rep)
                series = render_plot_series(plot_series_matrix(rep))
            else:
                knob = args.knob or next((r.knob for r in table.rows if r.knob), None)
                if knob is None:
                    raise UsageError("results carry no sweep knob; use --style matrix")
                rep = sweep_report(table, knob)
                text = render_sweep(rep)
                series = render_plot_series(plot_series_sweep(rep))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except KeyError as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from None
    sys.stdout.write(text)
    (out / f"report-{args.style}.csv").write_text(text)
    if series:
        (out / f"plot-{args.style}.csv").write_text(series)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qbench", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="errors only")
    sub = p.add_subparsers(dest="command", required=True)

    def hosts(sp):
        sp.add_argument("--client-host", default="local", help="'local' or [ssh://][user@]host (default: local)")
        sp.add_argument("--server-host", default="local", help="'local' or [ssh://][user@]host (default: local)")
        sp.add_argument("--simulate-host-tools", action="store_true",
                        help="answer sysctl/ethtool/netstat from an in-memory host (unprivileged testing)")

    sp = sub.add_parser("check", help="validate a plan and probe the hosts")
    sp.add_argument("--plan", required=True)
    hosts(sp)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("matrix", help="list the measurements a plan expands to")
    sp.add_argument("--plan", required=True)
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("run", help="execute every measurement of a plan")
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", required=True, help="artifact directory")
    hosts(sp)
    sp.add_argument("--collectors", help="comma-separated collector ids (overrides the plan)")
    sp.add_argument("--server-addr", help="address the client uses to reach the server")
    sp.add_argument("--port", type=int, default=0, help="server port (0: pick a free one locally, 4433 remotely)")
    sp.add_argument("--grace", type=float, default=1.0, help="seconds to wait for a server without ready_pattern")
    sp.add_argument("--keep-workdirs", action="store_true", help="leave host-side working directories in place")
    sp.add_argument("--force", action="store_true", help="replace existing measurements in --out")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("parse", help="parse raw artifacts into results tables")
    sp.add_argument("--out", required=True, help="artifact directory written by run")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("report", help="summarize parsed results")
    sp.add_argument("--out", required=True, help="artifact directory written by run")
    sp.add_argument("--style", choices=STYLES, default="matrix")
    sp.add_argument("--knob", help="sweep knob (default: the one in the results)")
    sp.add_argument("--stat", default="median", choices=("median", "mean", "q1", "q3", "min", "max"),
                    help="statistic shown in matrix cells")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExecutorError as exc:
        print(f"qbench: host error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
