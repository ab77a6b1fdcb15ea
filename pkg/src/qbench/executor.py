"""Command execution on measurement hosts.

Two executors share one contract: :class:`LocalExecutor` runs everything as
local processes (desk-scale loopback measurements) and :class:`SSHExecutor`
drives a remote node through an ``ssh``-compatible transport.  Foreground
commands on one executor run sequentially; background tasks are started
explicitly and are stopped individually.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shlex
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

logger = logging.getLogger(__name__)

DEFAULT_STOP_GRACE = 3.0


class ExecutorError(Exception):
    """A host could not be reached or a file operation failed."""


@dataclass
class CommandResult:
    command: str
    returncode: int
    stdout: str = ""
    stderr: str = ""
    timed_out: bool = False

    @property
    def ok(self) -> bool:
        return self.returncode == 0 and not self.timed_out


def _merged_env(env: Optional[Mapping[str, str]]) -> dict:
    merged = dict(os.environ)
    if env:
        merged.update({k: str(v) for k, v in env.items()})
    return merged


def _kill_group(proc: subprocess.Popen, sig: int) -> None:
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


class BackgroundTask:
    """Handle on a process started with :meth:`Executor.start`."""

    name: str
    command: str
    started_at: float
    stdout_path: str
    stderr_path: str

    def poll(self) -> Optional[int]:
        raise NotImplementedError

    def wait(self, timeout: Optional[float] = None) -> Optional[int]:
        """Block until exit; returns the exit code or None on timeout."""
        raise NotImplementedError

    def stop(self, sig: int = signal.SIGTERM, grace: float = DEFAULT_STOP_GRACE) -> Optional[int]:
        """Signal the task, escalate to SIGKILL after ``grace`` seconds."""
        raise NotImplementedError

    @property
    def running(self) -> bool:
        return self.poll() is None


class Executor:
    """Runs commands and moves files on one host."""

    host: str = "localhost"

    def run(
        self,
        command: str,
        env: Optional[Mapping[str, str]] = None,
        timeout: Optional[float] = None,
    ) -> CommandResult:
        raise NotImplementedError

    def start(
        self,
        command: str,
        env: Optional[Mapping[str, str]] = None,
        stdout_path: Optional[str] = None,
        stderr_path: Optional[str] = None,
        name: str = "",
    ) -> BackgroundTask:
        raise NotImplementedError

    def put(self, local: Path, remote: str) -> None:
        raise NotImplementedError

    def get(self, remote: str, local: Path) -> None:
        raise NotImplementedError

    def mkdtemp(self, prefix: str = "qbench-") -> str:
        raise NotImplementedError

    def makedirs(self, path: str) -> None:
        self._check(self.run(f"mkdir -p {shlex.quote(path)}"), "mkdir")

    def remove(self, path: str) -> None:
        self.run(f"rm -rf {shlex.quote(path)}")

    def exists(self, path: str) -> bool:
        return self.run(f"test -e {shlex.quote(path)}").returncode == 0

    def read_text(self, path: str) -> Optional[str]:
        result = self.run(f"cat {shlex.quote(path)}")
        return result.stdout if result.returncode == 0 else None

    def file_info(self, path: str) -> Optional[tuple]:
        """(size, sha256 hex) of a file on the host, or None if absent."""
        q = shlex.quote(path)
        result = self.run(f"test -f {q} && stat -c %s {q} && sha256sum {q}")
        if result.returncode != 0:
            return None
        lines = result.stdout.split("\n")
        return int(lines[0].strip()), lines[1].split()[0]

    def reachable(self) -> bool:
        try:
            return self.run("true", timeout=15).ok
        except ExecutorError:
            return False

    def _check(self, result: CommandResult, what: str) -> CommandResult:
        if not result.ok:
            raise ExecutorError(
                f"{what} failed on {self.host} (exit {result.returncode}): {result.stderr.strip()}"
            )
        return result

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.host!r})"


# ---------------------------------------------------------------------------
# local


class LocalTask(BackgroundTask):
    def __init__(self, proc, name, command, stdout_path, stderr_path, handles):
        self.proc = proc
        self.name = name
        self.command = command
        self.started_at = time.time()
        self.stdout_path = stdout_path
        self.stderr_path = stderr_path
        self._handles = handles

    @property
    def pid(self) -> int:
        return self.proc.pid

    def _close(self):
        for h in self._handles:
            h.close()
        self._handles = []

    def poll(self):
        rc = self.proc.poll()
        if rc is not None:
            self._close()
        return rc

    def wait(self, timeout=None):
        try:
            rc = self.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return None
        self._close()
        return rc

    def stop(self, sig=signal.SIGTERM, grace=DEFAULT_STOP_GRACE):
        if self.proc.poll() is None:
            _kill_group(self.proc, sig)
            try:
                self.proc.wait(timeout=grace)
            except subprocess.TimeoutExpired:
                _kill_group(self.proc, signal.SIGKILL)
                self.proc.wait()
        else:
            # leader gone; reap any stragglers left in its group
            _kill_group(self.proc, signal.SIGKILL)
        self._close()
        return self.proc.returncode


class LocalExecutor(Executor):
    """Executes on this machine; used for loopback measurements."""

    def __init__(self, host: str = "localhost"):
        self.host = host

    def run(self, command, env=None, timeout=None):
        proc = subprocess.Popen(
            command,
            shell=True,
            env=_merged_env(env),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            stdin=subprocess.DEVNULL,
            text=True,
            errors="replace",
            start_new_session=True,
        )
        try:
            out, err = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            _kill_group(proc, signal.SIGKILL)
            out, err = proc.communicate()
            return CommandResult(command, -signal.SIGKILL, out, err, timed_out=True)
        return CommandResult(command, proc.returncode, out, err)

    def start(self, command, env=None, stdout_path=None, stderr_path=None, name=""):
        handles = []
        out = subprocess.DEVNULL
        err = subprocess.DEVNULL
        if stdout_path:
            out = open(stdout_path, "wb")
            handles.append(out)
        if stderr_path:
            err = open(stderr_path, "wb")
            handles.append(err)
        proc = subprocess.Popen(
            command,
            shell=True,
            env=_merged_env(env),
            stdout=out,
            stderr=err,
            stdin=subprocess.DEVNULL,
            start_new_session=True,
        )
        return LocalTask(proc, name or command, command, stdout_path or "", stderr_path or "", handles)

    def put(self, local, remote):
        if Path(local).resolve() != Path(remote).resolve():
            shutil.copyfile(local, remote)

    def get(self, remote, local):
        src = Path(remote)
        if not src.exists():
            raise ExecutorError(f"{remote} does not exist on {self.host}")
        Path(local).parent.mkdir(parents=True, exist_ok=True)
        if src.is_dir():
            shutil.copytree(src, local, dirs_exist_ok=True)
        elif src.resolve() != Path(local).resolve():
            shutil.copyfile(src, local)

    def mkdtemp(self, prefix="qbench-"):
        return tempfile.mkdtemp(prefix=prefix)

    def makedirs(self, path):
        os.makedirs(path, exist_ok=True)

    def remove(self, path):
        p = Path(path)
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        elif p.exists():
            p.unlink()

    def exists(self, path):
        return os.path.exists(path)

    def read_text(self, path):
        try:
            return Path(path).read_text(errors="replace")
        except OSError:
            return None

    def file_info(self, path):
        return local_file_info(Path(path))

    def reachable(self):
        return True


def local_file_info(path: Path) -> Optional[tuple]:
    if not path.is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return path.stat().st_size, h.hexdigest()


# ---------------------------------------------------------------------------
# ssh


def _remote_script(command: str, env: Optional[Mapping[str, str]]) -> str:
    exports = "".join(f"export {k}={shlex.quote(str(v))}; " for k, v in (env or {}).items())
    return exports + command


class SSHTask(BackgroundTask):
    def __init__(self, executor, pid, name, command, stdout_path, stderr_path, rc_path):
        self.executor = executor
        self.pid = pid
        self.name = name
        self.command = command
        self.started_at = time.time()
        self.stdout_path = stdout_path
        self.stderr_path = stderr_path
        self.rc_path = rc_path
        self._rc: Optional[int] = None

    def poll(self):
        if self._rc is not None:
            return self._rc
        if self._read_rc() is not None:
            return self._rc
        if self.executor.run(f"kill -0 {self.pid}").returncode != 0 and self._read_rc() is None:
            # gone without writing a code: killed by a signal
            self._rc = -1
        return self._rc

    def _read_rc(self):
        text = self.executor.read_text(self.rc_path)
        if text and text.strip().lstrip("-").isdigit():
            self._rc = int(text.strip())
        return self._rc

    def wait(self, timeout=None, interval=0.2):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            rc = self.poll()
            if rc is not None:
                return rc
            if deadline is not None and time.monotonic() >= deadline:
                return None
            time.sleep(interval)

    def stop(self, sig=signal.SIGTERM, grace=DEFAULT_STOP_GRACE):
        if self.poll() is None:
            self.executor.run(f"kill -{int(sig)} -- -{self.pid}")
            if self.wait(timeout=grace) is None:
                self.executor.run(f"kill -9 -- -{self.pid}")
                self.wait(timeout=grace)
        if self._rc is None:
            self._rc = -int(signal.SIGKILL)
        return self._rc


class SSHExecutor(Executor):
    """Runs commands on a remote node via ``ssh``; files move via ``scp``.

    ``ssh`` and ``scp`` are argv prefixes so a jump host, identity file, or a
    test shim can be substituted.
    """

    def __init__(
        self,
        host: str,
        ssh: Sequence[str] = ("ssh", "-o", "BatchMode=yes"),
        scp: Sequence[str] = ("scp", "-q", "-r", "-o", "BatchMode=yes"),
    ):
        self.host = host
        self.ssh = list(ssh)
        self.scp = list(scp)

    def run(self, command, env=None, timeout=None):
        argv = [*self.ssh, self.host, _remote_script(command, env)]
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                text=True,
                errors="replace",
                timeout=timeout,
                stdin=subprocess.DEVNULL,
            )
        except subprocess.TimeoutExpired as exc:
            return CommandResult(command, -signal.SIGKILL, exc.stdout or "", exc.stderr or "", timed_out=True)
        except FileNotFoundError as exc:
            raise ExecutorError(f"ssh transport unavailable: {exc}") from exc
        if proc.returncode == 255:
            raise ExecutorError(f"ssh to {self.host} failed: {proc.stderr.strip()}")
        return CommandResult(command, proc.returncode, proc.stdout, proc.stderr)

    def start(self, command, env=None, stdout_path=None, stderr_path=None, name=""):
        out = stdout_path or "/dev/null"
        err = stderr_path or "/dev/null"
        rc_path = f"{out}.rc" if stdout_path else f"/tmp/qbench-{time.time_ns()}.rc"
        inner = f"( {_remote_script(command, env)} ); echo $? > {shlex.quote(rc_path)}"
        launcher = (
            f"rm -f {shlex.quote(rc_path)}; "
            f"setsid sh -c {shlex.quote(inner)} > {shlex.quote(out)} 2> {shlex.quote(err)} "
            f"< /dev/null & echo $!"
        )
        result = self._check(self.run(launcher), f"starting {name or command!r}")
        pid = int(result.stdout.strip().splitlines()[-1])
        return SSHTask(self, pid, name or command, command, out, err, rc_path)

    def put(self, local, remote):
        self._copy([str(local), f"{self.host}:{remote}"])

    def get(self, remote, local):
        Path(local).parent.mkdir(parents=True, exist_ok=True)
        self._copy([f"{self.host}:{remote}", str(local)])

    def _copy(self, args):
        proc = subprocess.run([*self.scp, *args], capture_output=True, text=True)
        if proc.returncode != 0:
            raise ExecutorError(f"copy {args[0]} -> {args[1]} failed: {proc.stderr.strip()}")

    def mkdtemp(self, prefix="qbench-"):
        result = self._check(self.run(f"mktemp -d -t {shlex.quote(prefix)}XXXXXX"), "mktemp")
        return result.stdout.strip()


def make_executor(spec: Optional[str]) -> Executor:
    """Build an executor from a host string.

    ``local``/``localhost``/empty give a :class:`LocalExecutor`; anything
    else (``user@node``, ``ssh://user@node``) is an SSH target.
    """
    if not spec or spec in ("local", "localhost", "127.0.0.1", "loopback"):
        return LocalExecutor()
    if spec.startswith("ssh://"):
        spec = spec[len("ssh://"):]
    return SSHExecutor(spec)
