"""Minimal file-transfer endpoints speaking the harness's environment contract.

They stand in for a real QUIC stack so the harness can be tested end to end
on loopback.  The transport is plain TCP with a tiny framing::

    client -> server   GET /<file name>\\n
    server -> client   8-byte big-endian length, then the file bytes

Run as ``python -m qbench.refendpoints``; the role comes from ``ROLE``.
"""

from __future__ import annotations

import os
import signal
import socket
import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from urllib.parse import urlparse

READY_LINE = "ready"
CHUNK = 1 << 20
CONNECT_TIMEOUT = 10.0
_LENGTH = struct.Struct(">Q")

REQUIRED = {
    "server": ("IP", "PORT", "WWW"),
    "client": ("IP", "PORT", "REQUESTS", "DOWNLOADS"),
}


class EndpointError(Exception):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    role: str
    ip: str
    port: int
    www: Optional[Path] = None
    downloads: Optional[Path] = None
    requests: tuple = ()
    logs: Optional[Path] = None

    @classmethod
    def from_env(cls, env=None) -> "EndpointConfig":
        env = os.environ if env is None else env
        role = env.get("ROLE", "")
        if role not in REQUIRED:
            raise EndpointError(f"ROLE must be client or server, got {role!r}")
        missing = [k for k in REQUIRED[role] if not env.get(k)]
        if missing:
            raise EndpointError(f"missing environment variable(s): {', '.join(missing)}")
        try:
            port = int(env["PORT"])
        except ValueError:
            raise EndpointError(f"PORT is not an integer: {env['PORT']!r}") from None
        path = lambda k: Path(env[k]) if env.get(k) else None  # noqa: E731
        return cls(
            role=role,
            ip=env["IP"],
            port=port,
            www=path("WWW"),
            downloads=path("DOWNLOADS"),
            requests=tuple(env.get("REQUESTS", "").split()),
            logs=path("LOGS"),
        )


def _served_file(www: Path, name: Optional[str] = None) -> Path:
    if name:
        candidate = www / Path(name).name
        if not candidate.is_file():
            raise EndpointError(f"requested file {name!r} not found in {www}")
        return candidate
    files = sorted(p for p in www.iterdir() if p.is_file()) if www.is_dir() else []
    if not files:
        raise EndpointError(f"no file to serve in WWW directory {www}")
    return files[0]


def _recv_line(conn: socket.socket, limit: int = 4096) -> str:
    buf = bytearray()
    while not buf.endswith(b"\n"):
        chunk = conn.recv(1)
        if not chunk:
            break
        buf += chunk
        if len(buf) > limit:
            raise EndpointError("request line too long")
    return buf.decode("utf-8", errors="replace").strip()


def _stop(signum, frame):
    raise SystemExit(0)


def run_reference_server(cfg: EndpointConfig) -> int:
    """Serve one file to one client, then exit 0."""
    try:
        default = _served_file(cfg.www)
    except EndpointError as exc:
        print(f"server: {exc}", file=sys.stderr)
        return 2
    family = socket.AF_INET6 if ":" in cfg.ip else socket.AF_INET
    srv = socket.socket(family, socket.SOCK_STREAM)
    try:
        srv.bind((cfg.ip, cfg.port))
        srv.listen(1)
    except OSError as exc:
        print(f"server: cannot bind {cfg.ip}:{cfg.port}: {exc}", file=sys.stderr)
        srv.close()
        return 3
    signal.signal(signal.SIGTERM, _stop)
    print(f"{READY_LINE} {cfg.ip}:{srv.getsockname()[1]}", flush=True)
    try:
        conn, peer = srv.accept()
        with conn:
            request = _recv_line(conn)
            name = request[4:].lstrip("/") if request.startswith("GET ") else None
            try:
                path = _served_file(cfg.www, name) if name else default
            except EndpointError as exc:
                print(f"server: {exc}", file=sys.stderr)
                return 4
            size = path.stat().st_size
            conn.sendall(_LENGTH.pack(size))
            with path.open("rb") as f:
                if size:
                    conn.sendfile(f)
            conn.shutdown(socket.SHUT_WR)
            # wait for the client to close so the last bytes are not reset
            conn.settimeout(30)
            try:
                while conn.recv(CHUNK):
                    pass
            except OSError:
                pass
        print(f"served {path.name} ({size} bytes) to {peer[0]}", flush=True)
        return 0
    finally:
        srv.close()


def _recv_exact(conn: socket.socket, n: int, out) -> int:
    got = 0
    while got < n:
        chunk = conn.recv(min(CHUNK, n - got))
        if not chunk:
            break
        out.write(chunk)
        got += len(chunk)
    return got


def run_reference_client(cfg: EndpointConfig) -> int:
    """Download the first request into DOWNLOADS and report the duration."""
    name = Path(urlparse(cfg.requests[0]).path).name if cfg.requests else ""
    if not name:
        print("client: REQUESTS names no file", file=sys.stderr)
        return 2
    cfg.downloads.mkdir(parents=True, exist_ok=True)
    target = cfg.downloads / name
    t0 = time.perf_counter()
    try:
        conn = socket.create_connection((cfg.ip, cfg.port), timeout=CONNECT_TIMEOUT)
    except OSError as exc:
        print(f"client: cannot connect to {cfg.ip}:{cfg.port}: {exc}", file=sys.stderr)
        return 3
    with conn:
        conn.settimeout(None)
        conn.sendall(f"GET /{name}\n".encode())
        header = bytearray()
        while len(header) < _LENGTH.size:
            chunk = conn.recv(_LENGTH.size - len(header))
            if not chunk:
                print("client: connection closed before the length header", file=sys.stderr)
                return 4
            header += chunk
        (size,) = _LENGTH.unpack(bytes(header))
        with target.open("wb") as out:
            got = _recv_exact(conn, size, out)
    elapsed = time.perf_counter() - t0
    if got != size:
        print(f"client: short read, {got} of {size} bytes", file=sys.stderr)
        return 5
    print(f"duration_ms={max(1, round(elapsed * 1000))}", flush=True)
    return 0


def main(env=None) -> int:
    try:
        cfg = EndpointConfig.from_env(env)
    except EndpointError as exc:
        print(f"refendpoint: {exc}", file=sys.stderr)
        return 2
    if cfg.role == "server":
        return run_reference_server(cfg)
    return run_reference_client(cfg)


if __name__ == "__main__":
    sys.exit(main())
