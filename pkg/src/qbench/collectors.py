"""Monitoring tools wrapped around a measurement.

Each collector runs in one of three modes:

* ``snapshot-pair``: run once before and once after the transfer
  (``ethtool -S``, ``netstat -su``);
* ``background-stream``: runs for the whole transfer and is stopped
  afterwards (``tcpdump``, ``ifstat``, ``pidstat``, ``perf``);
* ``directory-harvest``: a directory handed to the endpoints (``QLOGDIR``)
  whose files are collected afterwards (``qlog``).

Command templates understand ``{interface}``, ``{port}``, ``{output}``,
``{interval}``, ``{frequency}`` and ``{pids}``.  Raw outputs land in
``<dest>/<collector>/<blob>``.
"""

from __future__ import annotations

import json
import logging
import posixpath
import shlex
import signal
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .executor import Executor, ExecutorError

logger = logging.getLogger(__name__)

SNAPSHOT = "snapshot-pair"
STREAM = "background-stream"
HARVEST = "directory-harvest"

PIDSTAT_INTERVAL = 1
PERF_FREQUENCY = 99
STARTUP_CHECK = 0.2


@dataclass(frozen=True)
class CollectorSpec:
    id: str
    mode: str
    command: str = ""
    # interface, pid pattern or directory, depending on the tool
    target: Optional[str] = None
    # run after a stream stops; stdout becomes an extra blob
    finalize: str = ""
    stop_signal: int = signal.SIGINT

    @property
    def tool(self) -> str:
        return self.command.split()[0] if self.command else ""


DEFAULT_COLLECTORS = {
    "ethtool": CollectorSpec("ethtool", SNAPSHOT, "ethtool -S {interface}"),
    "netstat": CollectorSpec("netstat", SNAPSHOT, "netstat -su"),
    "qlog": CollectorSpec("qlog", HARVEST),
    "tcpdump": CollectorSpec("tcpdump", STREAM, "tcpdump -i {interface} -s 96 -w {output} udp port {port}"),
    "ifstat": CollectorSpec("ifstat", STREAM, "ifstat -i {interface} -t -n {interval}"),
    "pidstat": CollectorSpec("pidstat", STREAM, "pidstat -u -h {interval}"),
    "perf": CollectorSpec(
        "perf", STREAM, "perf record -a -g -F {frequency} -o {output}", finalize="perf script -i {output}"
    ),
}
# off unless asked for: they slow the endpoints down considerably
HEAVY = frozenset({"tcpdump", "qlog", "perf"})
_STREAM_OUTPUT = {"tcpdump": "capture.pcap", "perf": "perf.data"}


def collector_specs(ids, overrides: Optional[dict] = None) -> list:
    """Specs for ``ids`` in a stable order, with per-id field overrides."""
    out = []
    for cid in sorted(ids):
        spec = DEFAULT_COLLECTORS[cid]
        if overrides and cid in overrides:
            spec = replace(spec, **overrides[cid])
        out.append(spec)
    return out


@dataclass
class RawToolOutputs:
    blobs: dict = field(default_factory=dict)  # collector id -> {blob name: local Path}
    failures: dict = field(default_factory=dict)  # collector id -> reason
    snapshot_times: dict = field(default_factory=dict)  # collector id -> (before, after)

    def blob(self, cid: str, name: str) -> Optional[Path]:
        return self.blobs.get(cid, {}).get(name)

    def to_dict(self) -> dict:
        return {
            "blobs": {k: sorted(v) for k, v in self.blobs.items()},
            "failures": dict(self.failures),
            "snapshot_times": {k: list(v) for k, v in self.snapshot_times.items()},
        }


@dataclass
class CollectorSession:
    executor: Executor
    specs: list
    workdir: str
    dest: Path
    context: dict
    tasks: dict = field(default_factory=dict)
    before: dict = field(default_factory=dict)  # id -> (text, timestamp)
    dirs: dict = field(default_factory=dict)  # id -> host directory
    failures: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    _result: Optional[RawToolOutputs] = None

    @property
    def stopped(self) -> bool:
        return self._result is not None


def _fill(template: str, context: dict, output: str = "", pids: str = "") -> str:
    values = {
        "interface": shlex.quote(str(context.get("interface", "eth0"))),
        "port": str(context.get("port", "")),
        "interval": str(context.get("interval", PIDSTAT_INTERVAL)),
        "frequency": str(context.get("frequency", PERF_FREQUENCY)),
        "output": shlex.quote(output),
        "pids": pids,
    }
    for k, v in values.items():
        template = template.replace("{" + k + "}", v)
    return template


def _tool_present(e: Executor, tool: str) -> bool:
    if not tool:
        return False
    return e.run(f"command -v {shlex.quote(tool)} >/dev/null 2>&1").ok


def start_collectors(specs, e: Executor, workdir: str, dest: Path, context: Optional[dict] = None) -> CollectorSession:
    """Take "before" snapshots, start streams and create harvest directories.

    A collector whose tool is missing or that fails to start is flagged in
    the session; the others carry on.
    """
    session = CollectorSession(e, list(specs), workdir, Path(dest), dict(context or {}))
    for spec in session.specs:
        cdir = posixpath.join(workdir, spec.id)
        try:
            e.makedirs(cdir)
            if spec.mode == HARVEST:
                session.dirs[spec.id] = cdir
                if spec.id == "qlog":
                    session.env["QLOGDIR"] = cdir
                continue
            if not _tool_present(e, spec.tool):
                session.failures[spec.id] = f"{spec.tool or spec.id} not found on {e.host}"
                continue
            if spec.mode == SNAPSHOT:
                result = e.run(_fill(spec.command, session.context), timeout=30)
                if not result.ok:
                    session.failures[spec.id] = f"before snapshot failed: {result.stderr.strip()}"
                    continue
                session.before[spec.id] = (result.stdout, time.time())
            else:
                _start_stream(session, spec, cdir)
        except ExecutorError as exc:
            session.failures[spec.id] = str(exc)
    return session


def _start_stream(session: CollectorSession, spec: CollectorSpec, cdir: str) -> None:
    e = session.executor
    pids = ""
    if spec.target:
        found = e.run(f"pgrep -d, -f {shlex.quote(spec.target)}")
        pids = found.stdout.strip()
        if not found.ok or not pids:
            session.failures[spec.id] = f"no process matches {spec.target!r} on {e.host}"
            return
    command = _fill(spec.command, session.context, posixpath.join(cdir, _STREAM_OUTPUT.get(spec.id, "output")), pids)
    if spec.target and "{pids}" not in spec.command and spec.id == "pidstat":
        command += f" -p {pids}"
    task = e.start(
        command,
        stdout_path=posixpath.join(cdir, "stdout"),
        stderr_path=posixpath.join(cdir, "stderr"),
        name=spec.id,
    )
    time.sleep(STARTUP_CHECK)
    rc = task.poll()
    if rc is not None and rc != 0:
        err = e.read_text(posixpath.join(cdir, "stderr")) or ""
        session.failures[spec.id] = f"exited {rc} at start: {err.strip()[:200]}"
        return
    session.tasks[spec.id] = task


def _save(dest: Path, name: str, text: str) -> Path:
    dest.mkdir(parents=True, exist_ok=True)
    path = dest / name
    path.write_text(text)
    return path


def stop_collectors(session: CollectorSession, grace: float = 3.0) -> RawToolOutputs:
    """Stop streams, take "after" snapshots, harvest directories.

    Always returns one entry per collector in the session.  Calling it again
    returns the first result unchanged.
    """
    if session._result is not None:
        return session._result
    e = session.executor
    out = RawToolOutputs()
    for spec in session.specs:
        cid = spec.id
        dest = session.dest / cid
        blobs = {}
        out.blobs[cid] = blobs
        cdir = posixpath.join(session.workdir, cid)
        try:
            if spec.mode == SNAPSHOT and cid in session.before:
                before, t0 = session.before[cid]
                blobs["before.txt"] = _save(dest, "before.txt", before)
                result = e.run(_fill(spec.command, session.context), timeout=30)
                t1 = time.time()
                blobs["after.txt"] = _save(dest, "after.txt", result.stdout if result.ok else "")
                out.snapshot_times[cid] = (t0, t1)
                if not result.ok:
                    session.failures[cid] = f"after snapshot failed: {result.stderr.strip()}"
            elif spec.mode == STREAM and cid in session.tasks:
                session.tasks[cid].stop(spec.stop_signal, grace)
                for name in ("stdout", "stderr", _STREAM_OUTPUT.get(cid)):
                    if name and e.exists(posixpath.join(cdir, name)):
                        e.get(posixpath.join(cdir, name), dest / name)
                        blobs[name] = dest / name
                if spec.finalize:
                    output = posixpath.join(cdir, _STREAM_OUTPUT.get(cid, "output"))
                    result = e.run(_fill(spec.finalize, session.context, output), timeout=600)
                    blobs["finalized.txt"] = _save(dest, "finalized.txt", result.stdout)
                    if not result.ok:
                        session.failures[cid] = f"finalize failed: {result.stderr.strip()[:200]}"
            elif spec.mode == HARVEST and cid in session.dirs:
                listing = e.run(f"find {shlex.quote(session.dirs[cid])} -type f")
                dest.mkdir(parents=True, exist_ok=True)
                for remote in sorted(listing.stdout.split()):
                    rel = posixpath.relpath(remote, session.dirs[cid])
                    e.get(remote, dest / rel)
                    blobs[rel] = dest / rel
        except ExecutorError as exc:
            session.failures[cid] = str(exc)
        if cid in session.failures:
            dest.mkdir(parents=True, exist_ok=True)
            blobs.setdefault("FAILED", _save(dest, "FAILED", session.failures[cid] + "\n"))
    out.failures = dict(session.failures)
    if out.blobs:
        session.dest.mkdir(parents=True, exist_ok=True)
        (session.dest / "collectors.json").write_text(json.dumps(out.to_dict(), indent=1, sort_keys=True))
    session._result = out
    return out
