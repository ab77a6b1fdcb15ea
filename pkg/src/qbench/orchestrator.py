"""One measurement end to end: setup, pre, run, post.

The endpoint contract is environment variables only::

    common  ROLE=client|server LOGS QLOGDIR SSLKEYLOGFILE
    server  IP PORT CERTS WWW
    client  IP PORT REQUESTS DOWNLOADS

plus ``CONGESTION_CONTROL`` and ``CIPHER_SCENARIO`` when the plan sets them.
A client may print ``duration_ms=<int>`` on stdout; that value then replaces
the wall-clock duration of the client process.
"""

from __future__ import annotations

import enum
import json
import logging
import posixpath
import re
import shlex
import signal
import socket
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .collectors import RawToolOutputs, collector_specs, start_collectors, stop_collectors
from .executor import Executor, ExecutorError, LocalExecutor, local_file_info
from .plan import MeasurementSpec
from .tuning import TuningCommands, TuningError, apply_host_tuning, reset_host_tuning

logger = logging.getLogger(__name__)

DURATION_LINE = re.compile(r"^duration_ms=(\d{1,15})\s*$", re.M)
DEFAULT_PORT = 4433


class TransferVerdict(str, enum.Enum):
    OK = "ok"
    SIZE_MISMATCH = "size-mismatch"
    CONTENT_MISMATCH = "content-mismatch"
    MISSING = "missing"


def compare_files(served: Optional[tuple], downloaded: Optional[tuple]) -> TransferVerdict:
    """Verdict from (size, sha256) pairs; ``served`` must exist."""
    if served is None:
        raise FileNotFoundError("served file missing")
    if downloaded is None:
        return TransferVerdict.MISSING
    if served[0] != downloaded[0]:
        return TransferVerdict.SIZE_MISMATCH
    if served[1] != downloaded[1]:
        return TransferVerdict.CONTENT_MISMATCH
    return TransferVerdict.OK


def verify_transfer(served, downloaded) -> TransferVerdict:
    served_info = local_file_info(Path(served))
    if served_info is None:
        raise FileNotFoundError(f"served file {served} does not exist")
    return compare_files(served_info, local_file_info(Path(downloaded)))


class PhaseError(Exception):
    def __init__(self, phase: str, host: str, message: str, status: Optional[str] = None):
        super().__init__(f"{phase} phase on {host}: {message}")
        self.phase = phase
        self.host = host
        self.status = status or f"{phase}-failed"


@dataclass
class RunOptions:
    server_addr: str = "127.0.0.1"
    bind_addr: Optional[str] = None
    port: int = 0  # 0: pick a free port (local servers only)
    readiness_grace: float = 1.0
    ready_timeout: float = 10.0
    make_file_command: str = "head -c {size} /dev/urandom > {path}"
    certs_dir: Optional[Path] = None
    tuning_commands: TuningCommands = field(default_factory=TuningCommands)
    collector_overrides: dict = field(default_factory=dict)
    collector_context: dict = field(default_factory=dict)
    sslkeylog: bool = False
    keep_workdirs: bool = False
    stop_grace: float = 3.0
    # called with the phase name as each phase begins; failure injection point
    on_phase: Optional[Callable[[str], None]] = None


@dataclass
class RunArtifacts:
    measurement_id: str
    spec: dict
    status: str = "pending"
    verdict: Optional[str] = None
    error: Optional[str] = None
    client_start: Optional[float] = None
    client_end: Optional[float] = None
    duration_s: Optional[float] = None
    duration_source: Optional[str] = None
    client_exit: Optional[int] = None
    server_exit: Optional[int] = None
    served: Optional[list] = None  # [size, sha256]
    downloaded: Optional[list] = None
    timed_out: bool = False
    tuning_restored: Optional[bool] = None
    tuning_errors: dict = field(default_factory=dict)
    applied_tuning: dict = field(default_factory=dict)  # role -> [[setting, prior], ...]
    events: list = field(default_factory=list)  # [timestamp, event, host]
    collectors: dict = field(default_factory=dict)  # role -> RawToolOutputs.to_dict()
    port: Optional[int] = None

    def event(self, name: str, host: str = "") -> None:
        self.events.append([time.time(), name, host])

    def event_time(self, name: str, host: Optional[str] = None) -> Optional[float]:
        for ts, ev, h in self.events:
            if ev == name and (host is None or h == host):
                return ts
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunArtifacts":
        return cls(**d)


def free_port(addr: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((addr, 0))
        return s.getsockname()[1]


def ensure_certs(directory: Path) -> Optional[Path]:
    """Self-signed cert.pem/priv.key in ``directory`` (needs ``openssl``)."""
    directory = Path(directory)
    cert, key = directory / "cert.pem", directory / "priv.key"
    if cert.is_file() and key.is_file():
        return directory
    directory.mkdir(parents=True, exist_ok=True)
    cmd = [
        "openssl", "req", "-x509", "-newkey", "ec", "-pkeyopt", "ec_paramgen_curve:prime256v1",
        "-nodes", "-keyout", str(key), "-out", str(cert), "-days", "30", "-subj", "/CN=server",
    ]
    try:
        subprocess.run(cmd, check=True, capture_output=True, timeout=60)
    except (OSError, subprocess.SubprocessError) as exc:
        logger.warning("could not create certificates: %s", exc)
        return None
    return directory


def _parse_duration(stdout: str) -> Optional[float]:
    found = DURATION_LINE.findall(stdout or "")
    return int(found[-1]) / 1000.0 if found else None


class _Run:
    def __init__(self, spec, client_exec, server_exec, collectors, out_dir, options):
        self.spec = spec
        self.hosts = {"client": client_exec, "server": server_exec}
        self.collectors = sorted(collectors)
        self.out = Path(out_dir)
        self.opt = options
        self.art = RunArtifacts(spec.measurement_id, spec.to_dict())
        self.workdirs = {}
        self.applied = {}
        self.sessions = {}
        self.server_task = None
        self.client_task = None
        self.phase = "setup"

    # -- helpers -----------------------------------------------------------

    def _enter(self, phase: str) -> None:
        self.phase = phase
        self.art.event(f"phase:{phase}")
        if self.opt.on_phase is not None:
            self.opt.on_phase(phase)

    def _path(self, role: str, *parts: str) -> str:
        return posixpath.join(self.workdirs[role], *parts)

    def _env(self, role: str) -> dict:
        impl = self.spec.client if role == "client" else self.spec.server
        qlog = self.sessions.get(role).env.get("QLOGDIR", "") if role in self.sessions else ""
        env = {
            "ROLE": role,
            "LOGS": self._path(role, "logs"),
            "QLOGDIR": qlog,
            "SSLKEYLOGFILE": self._path(role, "logs", "keys.log") if self.opt.sslkeylog else "",
            "PORT": str(self.art.port),
        }
        if role == "server":
            env.update(
                IP=self.opt.bind_addr or self.opt.server_addr,
                CERTS=self._path("server", "certs"),
                WWW=self._path("server", "www"),
            )
        else:
            host = self.opt.server_addr
            url_host = f"[{host}]" if ":" in host else host
            env.update(
                IP=host,
                REQUESTS=f"https://{url_host}:{self.art.port}/{self.spec.file_name}",
                DOWNLOADS=self._path("client", "downloads"),
            )
        if impl.congestion_control:
            env["CONGESTION_CONTROL"] = impl.congestion_control
        if impl.cipher_scenario:
            env["CIPHER_SCENARIO"] = impl.cipher_scenario
        return env

    # -- phases ------------------------------------------------------------

    def setup(self) -> None:
        self._enter("setup")
        for role, e in self.hosts.items():
            try:
                self.workdirs[role] = e.mkdtemp(f"qbench-{role}-")
                for sub in ("logs", "collectors"):
                    e.makedirs(self._path(role, sub))
            except ExecutorError as exc:
                raise PhaseError("setup", e.host, str(exc)) from exc
        server, client = self.hosts["server"], self.hosts["client"]
        server.makedirs(self._path("server", "www"))
        server.makedirs(self._path("server", "certs"))
        client.makedirs(self._path("client", "downloads"))
        if self.opt.certs_dir:
            for name in ("cert.pem", "priv.key"):
                src = Path(self.opt.certs_dir) / name
                if src.is_file():
                    server.put(src, self._path("server", "certs", name))

        served = self._path("server", "www", self.spec.file_name)
        cmd = self.opt.make_file_command.format(size=self.spec.transfer_size, path=shlex.quote(served))
        result = server.run(cmd, timeout=max(60.0, self.spec.timeout))
        info = server.file_info(served)
        if not result.ok or info is None or info[0] != self.spec.transfer_size:
            raise PhaseError("setup", server.host, f"could not create {self.spec.transfer_size} B file: {result.stderr.strip()}")
        self.art.served = list(info)

        if self.art.port is None:
            port = self.opt.port
            if not port:
                port = free_port() if isinstance(server, LocalExecutor) else DEFAULT_PORT
            self.art.port = port

        for role, impl in (("server", self.spec.server), ("client", self.spec.client)):
            if impl.setup_command:
                r = self.hosts[role].run(impl.setup_command, env=self._env(role), timeout=self.spec.timeout)
                if not r.ok:
                    raise PhaseError("setup", self.hosts[role].host, f"setup of {impl.name} exited {r.returncode}: {r.stderr.strip()[:300]}")

    def pre(self) -> None:
        self._enter("pre")
        for role, e in self.hosts.items():
            try:
                self.applied[role] = apply_host_tuning(self.spec.host_tuning, e, self.opt.tuning_commands)
            except TuningError as exc:
                raise PhaseError("pre", e.host, str(exc), status="tuning-failed") from exc
            self.art.applied_tuning[role] = [list(p) for p in self.applied[role].prior]
        context = {"interface": self.spec.host_tuning.interface_name, "port": self.art.port, **self.opt.collector_context}
        specs = collector_specs(self.collectors, self.opt.collector_overrides)
        for role, e in self.hosts.items():
            self.sessions[role] = start_collectors(
                specs, e, self._path(role, "collectors"), self.out / role, context
            )
            self.art.event("collectors_started", role)

    def run(self) -> None:
        self._enter("run")
        server, client = self.hosts["server"], self.hosts["client"]
        self.server_task = server.start(
            self.spec.server_command,
            env=self._env("server"),
            stdout_path=self._path("server", "logs", "stdout.txt"),
            stderr_path=self._path("server", "logs", "stderr.txt"),
            name="server",
        )
        self.art.event("server_start", "server")
        self._await_server()

        env = self._env("client")
        self.art.client_start = time.time()
        self.art.event("client_start", "client")
        t0 = time.monotonic()
        self.client_task = client.start(
            self.spec.client_command,
            env=env,
            stdout_path=self._path("client", "logs", "stdout.txt"),
            stderr_path=self._path("client", "logs", "stderr.txt"),
            name="client",
        )
        rc = self.client_task.wait(timeout=self.spec.timeout)
        wall = time.monotonic() - t0
        if rc is None:
            self.client_task.stop(signal.SIGKILL, self.opt.stop_grace)
            self.art.client_end = time.time()
            self.art.event("client_exit", "client")
            self.art.timed_out = True
            raise PhaseError("run", client.host, f"client exceeded {self.spec.timeout} s", status="timeout")
        self.art.client_end = time.time()
        self.art.event("client_exit", "client")
        self.art.client_exit = rc
        stdout = client.read_text(self._path("client", "logs", "stdout.txt")) or ""
        reported = _parse_duration(stdout)
        if reported is not None and reported > 0:
            self.art.duration_s, self.art.duration_source = reported, "endpoint"
        else:
            self.art.duration_s, self.art.duration_source = wall, "wall-clock"
        if rc != 0:
            err = client.read_text(self._path("client", "logs", "stderr.txt")) or ""
            raise PhaseError("run", client.host, f"client exited {rc}: {err.strip()[-300:]}", status="client-failed")

    def _await_server(self) -> None:
        server = self.hosts["server"]
        pattern = self.spec.server.ready_pattern
        stdout = self._path("server", "logs", "stdout.txt")
        deadline = time.monotonic() + (self.opt.ready_timeout if pattern else self.opt.readiness_grace)
        rx = re.compile(pattern) if pattern else None
        while True:
            rc = self.server_task.poll()
            if rc is not None:
                self.art.server_exit = rc
                err = server.read_text(self._path("server", "logs", "stderr.txt")) or ""
                raise PhaseError("run", server.host, f"server exited {rc} before the client started: {err.strip()[-300:]}",
                                 status="server-failed")
            if rx is not None and rx.search(server.read_text(stdout) or ""):
                self.art.event("server_ready", "server")
                return
            if time.monotonic() >= deadline:
                if rx is not None:
                    logger.warning("no readiness line from %s after %.1f s; starting client anyway",
                                   self.spec.server.name, self.opt.ready_timeout)
                return
            time.sleep(0.02)

    def post(self) -> None:
        try:
            self._enter("post")
        except Exception as exc:  # injected failure must not skip cleanup
            self._record_error(exc)
        if self.client_task is not None and self.client_task.poll() is None:
            self.client_task.stop(signal.SIGKILL, self.opt.stop_grace)
        for role, session in self.sessions.items():
            try:
                outputs: RawToolOutputs = stop_collectors(session)
                self.art.collectors[role] = outputs.to_dict()
            except Exception as exc:
                self.art.collectors[role] = {"error": str(exc)}
            self.art.event("collectors_stopped", role)
        if self.server_task is not None:
            rc = self.server_task.stop(signal.SIGTERM, self.opt.stop_grace)
            if self.art.server_exit is None:
                self.art.server_exit = rc
            self.art.event("server_stopped", "server")
        restored = True
        for role, applied in self.applied.items():
            try:
                reset_host_tuning(applied, self.hosts[role])
            except TuningError as exc:
                restored = False
                self.art.tuning_errors[role] = str(exc)
        self.art.tuning_restored = restored
        self.art.event("tuning_reset")
        self._collect_logs()

    def _collect_logs(self) -> None:
        for role, e in self.hosts.items():
            if role not in self.workdirs:
                continue
            try:
                e.get(self._path(role, "logs"), self.out / role / "logs")
            except ExecutorError as exc:
                logger.warning("log collection from %s failed: %s", e.host, exc)

    def verify(self) -> None:
        info = self.hosts["client"].file_info(self._path("client", "downloads", self.spec.file_name))
        self.art.downloaded = list(info) if info else None
        self.art.verdict = compare_files(tuple(self.art.served), info).value
        self.art.event("verified")

    def cleanup(self) -> None:
        if self.opt.keep_workdirs:
            return
        for role, wd in self.workdirs.items():
            try:
                self.hosts[role].remove(wd)
            except ExecutorError:
                pass

    def _record_error(self, exc: Exception) -> None:
        if isinstance(exc, PhaseError):
            status, msg = exc.status, str(exc)
        else:
            status, msg = f"{self.phase}-failed", f"{self.phase} phase: {exc}"
        if self.art.error is None:
            self.art.status, self.art.error = status, msg
        logger.error("%s: %s", self.spec.measurement_id, msg)

    def execute(self) -> RunArtifacts:
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            self.setup()
            self.pre()
            self.run()
            self.art.status = "completed"
        except Exception as exc:
            self._record_error(exc)
        finally:
            self.post()
        if self.art.status == "completed":
            try:
                self.verify()
            except Exception as exc:
                self._record_error(exc)
                self.art.verdict = "missing"
        if self.art.verdict is None:
            self.art.verdict = self.art.status
        if self.art.status == "completed" and self.art.tuning_restored is False:
            self.art.error = "tuning not restored: " + "; ".join(self.art.tuning_errors.values())
        self.cleanup()
        (self.out / "artifacts.json").write_text(json.dumps(self.art.to_dict(), indent=1, sort_keys=True))
        (self.out / "spec.json").write_text(json.dumps(self.spec.to_dict(), indent=1, sort_keys=True))
        return self.art


def run_measurement(
    spec: MeasurementSpec,
    client_exec: Executor,
    server_exec: Executor,
    collectors=(),
    out_dir="measurement",
    options: Optional[RunOptions] = None,
) -> RunArtifacts:
    """Execute one measurement; failures are recorded in the result, not raised.

    Tuning applied in the pre phase is reset in the post phase whatever
    happened in between.  Raw collector outputs and endpoint logs are copied
    to ``out_dir/<client|server>/``.
    """
    return _Run(spec, client_exec, server_exec, collectors, out_dir, options or RunOptions()).execute()
