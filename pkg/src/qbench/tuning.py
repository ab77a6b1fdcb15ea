"""OS-level host tuning applied around a measurement and reverted afterwards.

Socket buffer sizes go through ``sysctl``; NIC offloads through ``ethtool``.
Both mechanisms are command templates (:class:`TuningCommands`) so a host
with a different toolchain only needs a different template set.

Buffer sizes are binary: the Linux default UDP receive buffer is 208 KiB
(212992 bytes), and sweep multiples are multiples of that value.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Optional

from .executor import Executor

logger = logging.getLogger(__name__)

DEFAULT_RCVBUF_BYTES = 208 * 1024  # 212992

OFFLOAD_FEATURES = {
    "gso": "generic-segmentation-offload",
    "gro": "generic-receive-offload",
    "tso": "tcp-segmentation-offload",
}


def rcvbuf_from_multiple(multiple: float) -> int:
    """Bytes for a receive buffer ``multiple`` times the 208 KiB default."""
    if multiple <= 0:
        raise ValueError(f"buffer multiple must be positive, got {multiple}")
    return int(round(multiple * DEFAULT_RCVBUF_BYTES))


class TuningError(Exception):
    pass


class TuningPermissionError(TuningError):
    pass


class ReadBackMismatch(TuningError):
    def __init__(self, setting: str, wanted: str, got: str):
        super().__init__(f"{setting}: wrote {wanted!r} but read back {got!r}")
        self.setting = setting
        self.wanted = wanted
        self.got = got


class TuningResetError(TuningError):
    """Some settings could not be restored; ``failures`` maps setting to reason."""

    def __init__(self, host: str, failures: dict):
        names = ", ".join(sorted(failures))
        super().__init__(f"failed to restore {len(failures)} setting(s) on {host}: {names}")
        self.host = host
        self.failures = failures


@dataclass(frozen=True)
class HostTuning:
    udp_rcvbuf_bytes: Optional[int] = None
    udp_sndbuf_bytes: Optional[int] = None
    # sorted (feature, enabled) pairs, feature in OFFLOAD_FEATURES
    offload_profile: tuple = ()
    interface_name: str = "eth0"

    def __post_init__(self):
        for name in ("udp_rcvbuf_bytes", "udp_sndbuf_bytes"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value <= 0):
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        for feature, enabled in self.offload_profile:
            if feature not in OFFLOAD_FEATURES:
                raise ValueError(f"unknown offload {feature!r}; expected one of {sorted(OFFLOAD_FEATURES)}")
            if not isinstance(enabled, bool):
                raise ValueError(f"offload {feature} must be on/off")
        object.__setattr__(self, "offload_profile", tuple(sorted(dict(self.offload_profile).items())))

    @property
    def empty(self) -> bool:
        return self.udp_rcvbuf_bytes is None and self.udp_sndbuf_bytes is None and not self.offload_profile


def parse_offload_profile(value) -> tuple:
    """Normalize an offload profile.

    Accepts a mapping ``{"gso": "off", ...}`` or a ``+``-joined string naming
    the offloads to enable, all others disabled (``"none"``, ``"gso+gro"``).
    """
    if isinstance(value, dict):
        profile = {}
        for k, v in value.items():
            if isinstance(v, str):
                if v.lower() not in ("on", "off"):
                    raise ValueError(f"offload {k}: expected on/off, got {v!r}")
                v = v.lower() == "on"
            profile[str(k).lower()] = v
        return tuple(sorted(profile.items()))
    if isinstance(value, str):
        text = value.strip().lower()
        enabled = set() if text in ("none", "") else {p.strip() for p in text.split("+")}
        if text == "all":
            enabled = set(OFFLOAD_FEATURES)
        unknown = enabled - set(OFFLOAD_FEATURES)
        if unknown:
            raise ValueError(f"unknown offload(s) {sorted(unknown)} in {value!r}")
        return tuple(sorted((f, f in enabled) for f in OFFLOAD_FEATURES))
    raise ValueError(f"cannot interpret offload profile {value!r}")


@dataclass(frozen=True)
class TuningCommands:
    read_sysctl: str = "sysctl -n {key}"
    write_sysctl: str = "sysctl -w {key}={value}"
    read_offloads: str = "ethtool -k {interface}"
    write_offload: str = "ethtool -K {interface} {flag} {state}"
    check_interface: str = "test -e /sys/class/net/{interface}"
    rcvbuf_keys: tuple = ("net.core.rmem_max", "net.core.rmem_default")
    sndbuf_keys: tuple = ("net.core.wmem_max", "net.core.wmem_default")

    @classmethod
    def from_mapping(cls, data: dict) -> "TuningCommands":
        data = dict(data)
        for key in ("rcvbuf_keys", "sndbuf_keys"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class AppliedTuning:
    """Prior values of every changed setting on one host, in apply order."""

    host: str
    interface: str = ""
    prior: tuple = ()  # ((setting, prior_value), ...)
    commands: TuningCommands = field(default_factory=TuningCommands)

    @property
    def empty(self) -> bool:
        return not self.prior


@dataclass(frozen=True)
class ResetConfirmation:
    host: str
    restored: tuple = ()


_PERMISSION = re.compile(r"permission denied|operation not permitted|not permitted", re.I)


def _offload_setting(interface: str, flag: str) -> str:
    return f"offload:{interface}:{flag}"


def _parse_offloads(text: str) -> dict:
    """Features from ``ethtool -k`` output as name -> "on"/"off"."""
    features = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        name, _, rest = line.partition(":")
        tokens = rest.split()
        if tokens and tokens[0] in ("on", "off"):
            features[name.strip()] = tokens[0]
    return features


class _Tuner:
    def __init__(self, executor: Executor, commands: TuningCommands, interface: str):
        self.e = executor
        self.c = commands
        self.interface = interface

    def _run(self, command: str, setting: str):
        result = self.e.run(command)
        if not result.ok:
            msg = (result.stderr or result.stdout).strip()
            if _PERMISSION.search(msg):
                raise TuningPermissionError(f"{setting} on {self.e.host}: {msg}")
            raise TuningError(f"{setting} on {self.e.host}: `{command}` exited {result.returncode}: {msg}")
        return result

    def read(self, setting: str) -> str:
        if setting.startswith("offload:"):
            _, interface, flag = setting.split(":")
            cmd = self.c.read_offloads.format(interface=interface)
            features = _parse_offloads(self._run(cmd, setting).stdout)
            feature = OFFLOAD_FEATURES[flag]
            if feature not in features:
                raise TuningError(f"{setting}: {feature} not reported by `{cmd}`")
            return features[feature]
        return self._run(self.c.read_sysctl.format(key=setting), setting).stdout.strip()

    def write(self, setting: str, value: str) -> None:
        if setting.startswith("offload:"):
            _, interface, flag = setting.split(":")
            cmd = self.c.write_offload.format(interface=interface, flag=flag, state=value)
        else:
            cmd = self.c.write_sysctl.format(key=setting, value=value)
        self._run(cmd, setting)

    def set_verified(self, setting: str, value: str) -> None:
        self.write(setting, value)
        got = self.read(setting)
        if not _same(got, value):
            raise ReadBackMismatch(setting, value, got)


def _same(a: str, b: str) -> bool:
    # sysctl may print multi-value keys with tabs
    return " ".join(a.split()) == " ".join(b.split())


def desired_settings(t: HostTuning, commands: TuningCommands) -> list:
    wanted = []
    if t.udp_rcvbuf_bytes is not None:
        wanted += [(key, str(t.udp_rcvbuf_bytes)) for key in commands.rcvbuf_keys]
    if t.udp_sndbuf_bytes is not None:
        wanted += [(key, str(t.udp_sndbuf_bytes)) for key in commands.sndbuf_keys]
    for flag, enabled in t.offload_profile:
        wanted.append((_offload_setting(t.interface_name, flag), "on" if enabled else "off"))
    return wanted


def probe_settings(settings, e: Executor, commands: TuningCommands = TuningCommands()) -> dict:
    """Current values of the named settings (used to verify round trips)."""
    tuner = _Tuner(e, commands, "")
    return {s: tuner.read(s) for s in settings}


def apply_host_tuning(
    t: HostTuning, e: Executor, commands: TuningCommands = TuningCommands()
) -> AppliedTuning:
    """Apply ``t`` on ``e`` and return what is needed to undo it.

    Every write is read back.  If any step fails, settings already changed
    are restored before the error propagates.
    """
    if t.empty:
        return AppliedTuning(e.host, t.interface_name, (), commands)
    tuner = _Tuner(e, commands, t.interface_name)
    if t.offload_profile:
        check = commands.check_interface.format(interface=t.interface_name)
        if not e.run(check).ok:
            raise TuningError(f"unknown interface {t.interface_name!r} on {e.host}")

    prior = []
    try:
        for setting, value in desired_settings(t, commands):
            before = tuner.read(setting)
            if _same(before, value):
                continue
            prior.append((setting, before))
            tuner.set_verified(setting, value)
    except Exception:
        partial = AppliedTuning(e.host, t.interface_name, tuple(prior), commands)
        try:
            reset_host_tuning(partial, e)
        except TuningError as exc:
            logger.error("rollback after failed apply incomplete: %s", exc)
        raise
    applied = AppliedTuning(e.host, t.interface_name, tuple(prior), commands)
    logger.debug("applied %d setting(s) on %s", len(prior), e.host)
    return applied


def reset_host_tuning(a: AppliedTuning, e: Executor) -> ResetConfirmation:
    """Restore every setting recorded in ``a``; failures are aggregated."""
    tuner = _Tuner(e, a.commands, a.interface)
    failures = {}
    restored = []
    for setting, value in reversed(a.prior):
        try:
            # a write that failed during apply may have left the value untouched
            if not _same(tuner.read(setting), value):
                tuner.set_verified(setting, value)
            restored.append(setting)
        except TuningError as exc:
            failures[setting] = str(exc)
    if failures:
        raise TuningResetError(e.host, failures)
    return ResetConfirmation(e.host, tuple(restored))
