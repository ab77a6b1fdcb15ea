"""Experiment plans: loading, validation, matrix expansion and digests.

A plan is one TOML file::

    description = "baseline"
    repetitions = 50
    transfer_size = "8GB"          # int bytes or SI/IEC suffixed string
    timeout = 300                  # seconds per measurement
    pairs = "all-pairs"            # or [["lsquic", "quiche"], ...]
    collectors = ["ethtool", "netstat", "pidstat"]

    [tuning]
    interface = "eth0"
    udp_rcvbuf_multiple = 16       # or udp_rcvbuf_bytes
    offloads = "gso+gro+tso"       # or {gso = "on", gro = "off"}

    [sweep]
    knob = "udp_rcvbuf_multiple"
    values = [0.5, 1, 2, 4, 8, 16, 32, 64]

    [implementations.lsquic]
    role = "both"
    client = "/opt/lsquic/client.sh"
    server = "/opt/lsquic/server.sh"
    version = "cat /opt/lsquic/VERSION"
    congestion_control = "cubic"

Command templates may use ``{python}``, ``{name}``, ``{role}``,
``{congestion_control}`` and ``{cipher_scenario}``; any other text,
including shell ``${VARS}``, is passed through untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .tuning import OFFLOAD_FEATURES, HostTuning, TuningCommands, parse_offload_profile, rcvbuf_from_multiple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COLLECTOR_IDS = frozenset({"tcpdump", "qlog", "ifstat", "ethtool", "netstat", "pidstat", "perf"})
ROLES = ("client", "server")
ROLE_SUPPORT = ("client", "server", "both")
CIPHER_SCENARIOS = ("default", "force-aes", "force-chacha20")
KNOBS = ("udp_rcvbuf_multiple", "offload_profile", "cipher_scenario")
ALL_PAIRS = "all-pairs"

DEFAULT_TRANSFER_SIZE = 8 * 10**9
DEFAULT_REPETITIONS = 50
DEFAULT_TIMEOUT = 300.0

TEMPLATE_FIELDS = ("python", "name", "role", "congestion_control", "cipher_scenario")
_TEMPLATE_RE = re.compile(r"\{(%s)\}" % "|".join(TEMPLATE_FIELDS))
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")

_SIZE_UNITS = {
    "": 1, "b": 1,
    "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12,
    "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40,
}


class PlanError(ValueError):
    """Invalid plan; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ImplementationSpec:
    name: str
    role_support: str = "both"
    setup_command: str = ""
    # ((role, template), ...) for every supported role
    run_command: tuple = ()
    version_command: str = ""
    congestion_control: Optional[str] = None
    cipher_scenario: Optional[str] = None
    ready_pattern: Optional[str] = None
    perf_rules: Optional[str] = None
    process_pattern: Optional[str] = None

    def supports(self, role: str) -> bool:
        return self.role_support in (role, "both")

    def command_for(self, role: str) -> str:
        return dict(self.run_command)[role]


@dataclass(frozen=True)
class ParameterSweep:
    knob: str
    values: tuple


@dataclass(frozen=True)
class ExperimentPlan:
    implementations: tuple
    pairs: object = ALL_PAIRS  # ALL_PAIRS or tuple of (client, server)
    repetitions: int = DEFAULT_REPETITIONS
    transfer_size: int = DEFAULT_TRANSFER_SIZE
    sweep: Optional[ParameterSweep] = None
    host_tuning: HostTuning = field(default_factory=HostTuning)
    tuning_commands: TuningCommands = field(default_factory=TuningCommands)
    collectors: frozenset = frozenset()
    timeout: float = DEFAULT_TIMEOUT
    description: str = ""

    def implementation(self, name: str) -> ImplementationSpec:
        for impl in self.implementations:
            if impl.name == name:
                return impl
        raise KeyError(name)

    def resolved_pairs(self) -> list:
        """Concrete (client, server) names; all-pairs honours role support."""
        if self.pairs == ALL_PAIRS:
            clients = [i.name for i in self.implementations if i.supports("client")]
            servers = [i.name for i in self.implementations if i.supports("server")]
            return [(c, s) for c in clients for s in servers]
        return list(self.pairs)


@dataclass(frozen=True)
class MeasurementSpec:
    index: int
    measurement_id: str
    client: ImplementationSpec
    server: ImplementationSpec
    repetition_index: int
    knob: Optional[tuple]  # (knob, value)
    transfer_size: int
    file_name: str
    timeout: float
    host_tuning: HostTuning
    client_command: str
    server_command: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "measurement_id": self.measurement_id,
            "client": self.client.name,
            "server": self.server.name,
            "repetition_index": self.repetition_index,
            "knob": list(self.knob) if self.knob else None,
            "transfer_size": self.transfer_size,
            "file_name": self.file_name,
            "timeout": self.timeout,
            "host_tuning": _tuning_dict(self.host_tuning),
            "client_command": self.client_command,
            "server_command": self.server_command,
            "client_congestion_control": self.client.congestion_control,
            "server_congestion_control": self.server.congestion_control,
            "client_cipher_scenario": self.client.cipher_scenario,
            "server_cipher_scenario": self.server.cipher_scenario,
        }


# ---------------------------------------------------------------------------
# loading


def parse_size(value, where: str = "transfer_size") -> int:
    if isinstance(value, bool):
        raise PlanError(where, f"expected a byte count, got {value!r}")
    if isinstance(value, int):
        n = value
    elif isinstance(value, float) and value.is_integer():
        n = int(value)
    elif isinstance(value, str):
        m = re.fullmatch(r"\s*([0-9]+(?:\.[0-9]+)?)\s*([A-Za-z]*)\s*", value)
        if not m or m.group(2).lower() not in _SIZE_UNITS:
            raise PlanError(where, f"cannot parse size {value!r}")
        scaled = float(m.group(1)) * _SIZE_UNITS[m.group(2).lower()]
        if not scaled.is_integer():
            raise PlanError(where, f"{value!r} is not a whole number of bytes")
        n = int(scaled)
    else:
        raise PlanError(where, f"expected a byte count, got {value!r}")
    if n < 1:
        raise PlanError(where, f"must be at least 1 byte, got {n}")
    return n


def _reject_unknown(data: dict, allowed, where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        prefix = f"{where}." if where else ""
        raise PlanError(prefix + unknown[0], "unknown key")


def _expect(value, types, where: str):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise PlanError(where, f"expected {_type_names(types)}, got {value!r}")
    if not isinstance(value, types):
        raise PlanError(where, f"expected {_type_names(types)}, got {value!r}")
    return value


def _type_names(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    return " or ".join(t.__name__ for t in types)


def _check_template(text: str, where: str) -> str:
    _expect(text, str, where)
    stray = [m for m in re.findall(r"(?<!\$)\{([A-Za-z_]+)\}", text) if m not in TEMPLATE_FIELDS]
    if stray:
        raise PlanError(where, f"unknown template field {{{stray[0]}}}; known: {', '.join(TEMPLATE_FIELDS)}")
    return text


def _parse_implementation(name: str, data: dict) -> ImplementationSpec:
    where = f"implementations.{name}"
    if not _NAME_RE.match(name):
        raise PlanError(where, "implementation names must be identifiers")
    _expect(data, dict, where)
    _reject_unknown(
        data,
        ("role", "setup", "client", "server", "version", "congestion_control",
         "cipher_scenario", "ready_pattern", "perf_rules", "process"),
        where,
    )
    role = data.get("role", "both")
    if role not in ROLE_SUPPORT:
        raise PlanError(f"{where}.role", f"must be one of {ROLE_SUPPORT}, got {role!r}")
    run = []
    for r in ROLES:
        if role in (r, "both"):
            if r not in data:
                raise PlanError(f"{where}.{r}", f"run command required for role {r}")
            run.append((r, _check_template(data[r], f"{where}.{r}")))
        elif r in data:
            _check_template(data[r], f"{where}.{r}")
    cipher = data.get("cipher_scenario")
    if cipher is not None and cipher not in CIPHER_SCENARIOS:
        raise PlanError(f"{where}.cipher_scenario", f"must be one of {CIPHER_SCENARIOS}, got {cipher!r}")
    ready = data.get("ready_pattern")
    if ready is not None:
        try:
            re.compile(_expect(ready, str, f"{where}.ready_pattern"))
        except re.error as exc:
            raise PlanError(f"{where}.ready_pattern", f"bad regular expression: {exc}") from None
    cc = data.get("congestion_control")
    return ImplementationSpec(
        name=name,
        role_support=role,
        setup_command=_check_template(data.get("setup", ""), f"{where}.setup"),
        run_command=tuple(run),
        version_command=_check_template(data.get("version", ""), f"{where}.version"),
        congestion_control=_expect(cc, str, f"{where}.congestion_control") if cc is not None else None,
        cipher_scenario=cipher,
        ready_pattern=ready,
        perf_rules=data.get("perf_rules"),
        process_pattern=data.get("process"),
    )


def _parse_sweep(data: dict) -> ParameterSweep:
    _expect(data, dict, "sweep")
    _reject_unknown(data, ("knob", "values"), "sweep")
    knob = data.get("knob")
    if knob not in KNOBS:
        raise PlanError("sweep.knob", f"must be one of {KNOBS}, got {knob!r}")
    values = data.get("values")
    if not isinstance(values, list) or not values:
        raise PlanError("sweep.values", "must be a non-empty list")
    normalized = []
    for i, v in enumerate(values):
        where = f"sweep.values[{i}]"
        if knob == "udp_rcvbuf_multiple":
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0 or not math.isfinite(v):
                raise PlanError(where, f"buffer multiples must be positive numbers, got {v!r}")
            normalized.append(_norm_number(v))
        elif knob == "offload_profile":
            try:
                normalized.append(_profile_label(parse_offload_profile(v)))
            except ValueError as exc:
                raise PlanError(where, str(exc)) from None
        else:
            if v not in CIPHER_SCENARIOS:
                raise PlanError(where, f"must be one of {CIPHER_SCENARIOS}, got {v!r}")
            normalized.append(v)
    if len(set(normalized)) != len(normalized):
        raise PlanError("sweep.values", "duplicate values")
    return ParameterSweep(knob, tuple(normalized))


def _profile_label(profile: tuple) -> str:
    """Stable text form: "gso+gro" / "none" for full profiles, else "gso=off,tso=on"."""
    if {f for f, _ in profile} == set(OFFLOAD_FEATURES):
        return "+".join(f for f, enabled in profile if enabled) or "none"
    return ",".join(f"{f}={'on' if e else 'off'}" for f, e in profile)


def _profile_from_label(label: str) -> tuple:
    if "=" in label:
        return tuple(sorted((f, s == "on") for f, s in (p.split("=") for p in label.split(","))))
    return parse_offload_profile(label)


def _parse_tuning(data: dict):
    _expect(data, dict, "tuning")
    _reject_unknown(
        data,
        ("interface", "udp_rcvbuf_multiple", "udp_rcvbuf_bytes", "udp_sndbuf_bytes", "offloads", "commands"),
        "tuning",
    )
    if "udp_rcvbuf_multiple" in data and "udp_rcvbuf_bytes" in data:
        raise PlanError("tuning.udp_rcvbuf_multiple", "give either a multiple or bytes, not both")
    rcv = None
    if "udp_rcvbuf_multiple" in data:
        m = data["udp_rcvbuf_multiple"]
        if isinstance(m, bool) or not isinstance(m, (int, float)) or not m > 0:
            raise PlanError("tuning.udp_rcvbuf_multiple", f"must be a positive number, got {m!r}")
        rcv = rcvbuf_from_multiple(m)
    elif "udp_rcvbuf_bytes" in data:
        rcv = parse_size(data["udp_rcvbuf_bytes"], "tuning.udp_rcvbuf_bytes")
    snd = parse_size(data["udp_sndbuf_bytes"], "tuning.udp_sndbuf_bytes") if "udp_sndbuf_bytes" in data else None
    profile = ()
    if "offloads" in data:
        try:
            profile = parse_offload_profile(data["offloads"])
        except ValueError as exc:
            raise PlanError("tuning.offloads", str(exc)) from None
    interface = _expect(data.get("interface", "eth0"), str, "tuning.interface")
    try:
        tuning = HostTuning(rcv, snd, profile, interface)
    except ValueError as exc:
        raise PlanError("tuning", str(exc)) from None
    commands = TuningCommands()
    if "commands" in data:
        cmds = _expect(data["commands"], dict, "tuning.commands")
        _reject_unknown(cmds, TuningCommands.__dataclass_fields__, "tuning.commands")
        commands = TuningCommands.from_mapping(cmds)
    return tuning, commands


def plan_from_dict(data: dict) -> ExperimentPlan:
    """Validate a parsed plan document; raises :class:`PlanError`."""
    _expect(data, dict, "plan")
    _reject_unknown(
        data,
        ("description", "repetitions", "transfer_size", "timeout", "pairs", "collectors",
         "tuning", "sweep", "implementations"),
        "",
    )
    impls_raw = data.get("implementations")
    if not isinstance(impls_raw, dict) or not impls_raw:
        raise PlanError("implementations", "at least one implementation is required")
    impls = tuple(_parse_implementation(name, impls_raw[name]) for name in sorted(impls_raw))
    names = {i.name for i in impls}

    reps = data.get("repetitions", DEFAULT_REPETITIONS)
    if isinstance(reps, bool) or not isinstance(reps, int) or reps < 1:
        raise PlanError("repetitions", f"must be a positive integer, got {reps!r}")

    size = parse_size(data.get("transfer_size", DEFAULT_TRANSFER_SIZE))

    timeout = data.get("timeout", DEFAULT_TIMEOUT)
    if isinstance(timeout, bool) or not isinstance(timeout, (int, float)) or not timeout > 0:
        raise PlanError("timeout", f"must be a positive number of seconds, got {timeout!r}")

    raw_pairs = data.get("pairs", ALL_PAIRS)
    if raw_pairs == ALL_PAIRS:
        pairs = ALL_PAIRS
    elif isinstance(raw_pairs, list) and raw_pairs:
        pairs = []
        for i, p in enumerate(raw_pairs):
            where = f"pairs[{i}]"
            if not (isinstance(p, list) and len(p) == 2 and all(isinstance(x, str) for x in p)):
                raise PlanError(where, f"expected [client, server], got {p!r}")
            client, server = p
            for role, who in (("client", client), ("server", server)):
                if who not in names:
                    raise PlanError(where, f"references undeclared implementation {who!r}")
                if not next(i for i in impls if i.name == who).supports(role):
                    raise PlanError(where, f"{who!r} does not support the {role} role")
            pairs.append((client, server))
        pairs = tuple(pairs)
    else:
        raise PlanError("pairs", f"expected {ALL_PAIRS!r} or a list of [client, server], got {raw_pairs!r}")

    collectors = data.get("collectors", [])
    if not isinstance(collectors, list):
        raise PlanError("collectors", "expected a list")
    bad = [c for c in collectors if c not in COLLECTOR_IDS]
    if bad:
        raise PlanError("collectors", f"unknown collector {bad[0]!r}; expected one of {sorted(COLLECTOR_IDS)}")

    tuning, commands = _parse_tuning(data.get("tuning", {}))
    sweep = _parse_sweep(data["sweep"]) if "sweep" in data else None

    plan = ExperimentPlan(
        implementations=impls,
        pairs=pairs,
        repetitions=reps,
        transfer_size=size,
        sweep=sweep,
        host_tuning=tuning,
        tuning_commands=commands,
        collectors=frozenset(collectors),
        timeout=float(timeout),
        description=_expect(data.get("description", ""), str, "description"),
    )
    if not plan.resolved_pairs():
        raise PlanError("pairs", "no client/server combination is possible")
    return plan


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"plan file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise PlanError("plan", f"{path}: {exc}") from None
    return plan_from_dict(data)


# ---------------------------------------------------------------------------
# expansion


def render_template(template: str, impl: ImplementationSpec, role: str) -> str:
    values = {
        "python": sys.executable,
        "name": impl.name,
        "role": role,
        "congestion_control": impl.congestion_control or "",
        "cipher_scenario": impl.cipher_scenario or "default",
    }
    return _TEMPLATE_RE.sub(lambda m: values[m.group(1)], template)


def _knob_token(value) -> str:
    return re.sub(r"[^A-Za-z0-9.+=-]", "_", str(value))


def expand_matrix(plan: ExperimentPlan) -> list:
    """All measurements of ``plan``: pair-major, then knob value, then repetition."""
    knob_values = [None]
    if plan.sweep is not None:
        knob_values = [(plan.sweep.knob, v) for v in plan.sweep.values]
    specs = []
    for client_name, server_name in plan.resolved_pairs():
        for knob in knob_values:
            client = plan.implementation(client_name)
            server = plan.implementation(server_name)
            tuning = plan.host_tuning
            if knob is not None:
                name, value = knob
                if name == "udp_rcvbuf_multiple":
                    tuning = replace(tuning, udp_rcvbuf_bytes=rcvbuf_from_multiple(value))
                elif name == "offload_profile":
                    tuning = replace(tuning, offload_profile=_profile_from_label(value))
                elif name == "cipher_scenario":
                    client = replace(client, cipher_scenario=value)
                    server = replace(server, cipher_scenario=value)
            for rep in range(plan.repetitions):
                index = len(specs)
                parts = [f"{index:05d}", client.name, server.name]
                if knob is not None:
                    parts.append(_knob_token(knob[1]))
                parts.append(f"r{rep}")
                mid = "_".join(parts)
                specs.append(
                    MeasurementSpec(
                        index=index,
                        measurement_id=mid,
                        client=client,
                        server=server,
                        repetition_index=rep,
                        knob=knob,
                        transfer_size=plan.transfer_size,
                        file_name=f"transfer-{plan.transfer_size}.bin",
                        timeout=plan.timeout,
                        host_tuning=tuning,
                        client_command=render_template(client.command_for("client"), client, "client"),
                        server_command=render_template(server.command_for("server"), server, "server"),
                    )
                )
    return specs


# ---------------------------------------------------------------------------
# canonical form and digest


def _norm_number(x):
    if isinstance(x, float) and x.is_integer():
        return int(x)
    return x


def _canon(obj):
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_canon(v) for v in obj)
    if isinstance(obj, float):
        return _norm_number(obj)
    return obj


def _tuning_dict(t: HostTuning) -> dict:
    return {
        "interface": t.interface_name,
        "udp_rcvbuf_bytes": t.udp_rcvbuf_bytes,
        "udp_sndbuf_bytes": t.udp_sndbuf_bytes,
        "offloads": {f: ("on" if e else "off") for f, e in t.offload_profile},
    }


def plan_to_dict(plan: ExperimentPlan) -> dict:
    impls = {}
    for i in plan.implementations:
        impls[i.name] = {
            "role": i.role_support,
            "setup": i.setup_command,
            "run": dict(i.run_command),
            "version": i.version_command,
            "congestion_control": i.congestion_control,
            "cipher_scenario": i.cipher_scenario,
            "ready_pattern": i.ready_pattern,
            "perf_rules": i.perf_rules,
            "process": i.process_pattern,
        }
    return {
        "description": plan.description,
        "repetitions": plan.repetitions,
        "transfer_size": plan.transfer_size,
        "timeout": plan.timeout,
        "pairs": plan.pairs if plan.pairs == ALL_PAIRS else [list(p) for p in plan.pairs],
        "collectors": sorted(plan.collectors),
        "tuning": _tuning_dict(plan.host_tuning),
        "tuning_commands": {k: getattr(plan.tuning_commands, k) for k in TuningCommands.__dataclass_fields__},
        "sweep": None if plan.sweep is None else {"knob": plan.sweep.knob, "values": list(plan.sweep.values)},
        "implementations": impls,
    }


def canonical_json(plan: ExperimentPlan) -> str:
    return json.dumps(_canon(plan_to_dict(plan)), sort_keys=True, separators=(",", ":"))


def plan_digest(plan: ExperimentPlan) -> str:
    return hashlib.sha256(canonical_json(plan).encode()).hexdigest()
