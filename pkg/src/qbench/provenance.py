"""Reproducibility fingerprints: plan digest, versions and host hardware."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import shlex
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional

from . import __version__
from .executor import Executor
from .plan import ExperimentPlan, plan_digest, render_template

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardwareDescriptor:
    cpu_model: str
    cpu_year: Optional[int] = None
    max_frequency_ghz: Optional[float] = None
    memory_bytes: Optional[int] = None
    nic_model: str = ""

    def __post_init__(self):
        if not self.cpu_model:
            raise ValueError("cpu_model must be non-empty")


@dataclass(frozen=True)
class HostProbe:
    hardware: HardwareDescriptor
    os_release: str = ""
    kernel: str = ""


@dataclass
class EnvironmentProbe:
    """Raw probe results the fingerprint is built from.

    ``versions`` maps implementation name to its version string, or None when
    the version command failed.
    """

    hosts: dict = field(default_factory=dict)  # role -> HostProbe
    versions: dict = field(default_factory=dict)
    framework_version: str = __version__
    rule_digests: dict = field(default_factory=dict)


@dataclass
class ProvenanceRecord:
    plan_digest: str
    implementation_versions: dict
    framework_version: str
    hardware: dict
    os_release: dict
    timestamp: str
    rule_digests: dict = field(default_factory=dict)
    incomplete: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.incomplete

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hardware"] = {k: asdict(v) for k, v in self.hardware.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def digest(self) -> str:
        """sha256 of everything except the timestamp."""
        d = self.to_dict()
        d.pop("timestamp")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ProvenanceRecord":
        d = dict(d)
        d["hardware"] = {k: HardwareDescriptor(**v) for k, v in d["hardware"].items()}
        return cls(**d)


def fingerprint(plan: ExperimentPlan, env: EnvironmentProbe, timestamp: Optional[str] = None) -> ProvenanceRecord:
    """Bind a plan to the versions and hosts that will execute it.

    Implementations whose version could not be probed are listed in
    ``incomplete`` rather than failing the whole record.
    """
    versions = {}
    incomplete = []
    for impl in plan.implementations:
        v = env.versions.get(impl.name)
        if v is None:
            incomplete.append(impl.name)
        versions[impl.name] = v
    return ProvenanceRecord(
        plan_digest=plan_digest(plan),
        implementation_versions=versions,
        framework_version=env.framework_version,
        hardware={role: p.hardware for role, p in env.hosts.items()},
        os_release={role: p.os_release + (f" ({p.kernel})" if p.kernel else "") for role, p in env.hosts.items()},
        timestamp=timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        rule_digests=dict(env.rule_digests),
        incomplete=incomplete,
    )


# ---------------------------------------------------------------------------
# host probing


def parse_cpuinfo(text: str) -> Optional[str]:
    for line in text.splitlines():
        key, _, value = line.partition(":")
        if key.strip() in ("model name", "Model name", "Hardware", "cpu model") and value.strip():
            return value.strip()
    return None


def parse_lscpu_max_mhz(text: str) -> Optional[float]:
    m = re.search(r"^CPU max MHz:\s*([0-9.]+)", text, re.M)
    return float(m.group(1)) if m else None


def parse_meminfo(text: str) -> Optional[int]:
    m = re.search(r"^MemTotal:\s*(\d+)\s*kB", text, re.M)
    return int(m.group(1)) * 1024 if m else None


def parse_os_release(text: str) -> str:
    fields = {}
    for line in text.splitlines():
        k, sep, v = line.partition("=")
        if sep:
            fields[k.strip()] = v.strip().strip('"')
    return fields.get("PRETTY_NAME") or fields.get("NAME", "")


def parse_ethtool_driver(text: str) -> str:
    fields = dict(
        (k.strip(), v.strip()) for k, _, v in (line.partition(":") for line in text.splitlines()) if v
    )
    return " ".join(x for x in (fields.get("driver"), fields.get("version"), fields.get("bus-info")) if x)


def probe_host(e: Executor, interface: str = "eth0") -> HostProbe:
    cpu = parse_cpuinfo(e.read_text("/proc/cpuinfo") or "") or "unknown"
    freq = None
    khz = (e.read_text("/sys/devices/system/cpu/cpu0/cpufreq/cpuinfo_max_freq") or "").strip()
    if khz.isdigit():
        freq = int(khz) / 1e6
    else:
        lscpu = e.run("lscpu")
        mhz = parse_lscpu_max_mhz(lscpu.stdout) if lscpu.ok else None
        freq = mhz / 1000 if mhz else None
    mem = parse_meminfo(e.read_text("/proc/meminfo") or "")
    nic = ""
    drv = e.run(f"ethtool -i {shlex.quote(interface)}")
    if drv.ok:
        nic = parse_ethtool_driver(drv.stdout)
    if not nic:
        nic = (e.read_text(f"/sys/class/net/{interface}/device/uevent") or "").strip().replace("\n", " ")
    os_release = parse_os_release(e.read_text("/etc/os-release") or "")
    kernel = e.run("uname -r").stdout.strip()
    return HostProbe(HardwareDescriptor(cpu, None, freq, mem, nic), os_release, kernel)


def probe_versions(plan: ExperimentPlan, client_exec: Executor, server_exec: Executor) -> dict:
    """Run each implementation's version command on a host that runs it."""
    versions = {}
    for impl in plan.implementations:
        if not impl.version_command:
            versions[impl.name] = None
            continue
        role = "client" if impl.supports("client") else "server"
        e = client_exec if role == "client" else server_exec
        result = e.run(render_template(impl.version_command, impl, role), timeout=30)
        out = result.stdout.strip()
        versions[impl.name] = out.splitlines()[0] if result.ok and out else None
        if versions[impl.name] is None:
            logger.warning("version probe failed for %s: %s", impl.name, result.stderr.strip())
    return versions
