"""``ethtool -S`` and ``netstat -su`` counter snapshots and their deltas."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from types import MappingProxyType

from . import ParseError

KINDS = ("ethtool", "netstat")

# drop counters of interest; names differ between kernels and NIC drivers
RCVBUF_DROP_ALIASES = ("Udp.receive-buffer-errors", "Udp.RcvbufErrors", "Udp6.receive-buffer-errors")
RING_DROP_ALIASES = ("rx_dropped", "rx_missed_errors", "rx_fifo_errors", "rx_discards", "rx_out_of_buffer")
DELIVERED_ALIASES = ("Udp.packets-received", "Udp.InDatagrams")

_NAME_VALUE = re.compile(r"^\s*(?P<name>[^:]+?)\s*:\s*(?P<value>\d{1,20})\s*$")
_VALUE_WORDS = re.compile(r"^\s+(?P<value>\d{1,20})\s+(?P<words>\S.*?)\s*$")
# "Quick ack mode was activated 20 times"
_WORDS_VALUE_WORDS = re.compile(r"^\s+(?P<pre>[^\d:]+?)\s+(?P<value>\d{1,20})\s+(?P<post>[^\d:]+?)\s*$")
_SECTION = re.compile(r"^(?P<name>\S[^:]*):\s*$")
_SUBSECTION = re.compile(r"^\s+(?P<name>\S[^:]*):\s*$")


@dataclass(frozen=True)
class CounterMap:
    kind: str
    counters: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        object.__setattr__(self, "counters", MappingProxyType(dict(self.counters)))

    def __getitem__(self, name):
        return self.counters[name]

    def __len__(self):
        return len(self.counters)

    def get(self, name, default=None):
        return self.counters.get(name, default)

    def __eq__(self, other):
        return isinstance(other, CounterMap) and self.kind == other.kind and dict(self.counters) == dict(other.counters)

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.counters.items()))))


@dataclass(frozen=True)
class CounterDelta:
    deltas: dict
    # counters present in only one snapshot: name -> "before" | "after"
    missing: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.deltas[name]

    def get(self, name, default=None):
        return self.deltas.get(name, default)

    def first(self, aliases):
        """Delta of the first alias present, or None."""
        for name in aliases:
            if name in self.deltas:
                return self.deltas[name]
        return None


def _words_to_name(words: str) -> str:
    return "-".join(words.split())


def _parse_ethtool(lines):
    counters = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.strip() in ("NIC statistics:",) or line.strip().endswith("statistics:"):
            continue
        m = _NAME_VALUE.match(line)
        if not m:
            raise ParseError(f"ethtool: unrecognized line {lineno}: {line!r}", line=lineno)
        name = m.group("name").strip()
        if name in counters:
            raise ParseError(f"ethtool: duplicate counter {name!r} at line {lineno}", line=lineno)
        counters[name] = int(m.group("value"))
    return counters


def _parse_netstat(lines):
    counters = {}
    section = None
    subsection = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        m = _SECTION.match(line)
        if m:
            section, subsection = m.group("name").strip(), None
            continue
        if section is None:
            raise ParseError(f"netstat: counter outside a section at line {lineno}: {line!r}", line=lineno)
        m = _SUBSECTION.match(line)
        if m:
            subsection = _words_to_name(m.group("name"))
            continue
        m = _NAME_VALUE.match(line)
        if m and line[:1].isspace():
            name = _words_to_name(m.group("name"))
        else:
            m = _VALUE_WORDS.match(line)
            if m:
                name = _words_to_name(m.group("words"))
            else:
                m = _WORDS_VALUE_WORDS.match(line)
                if not m:
                    raise ParseError(f"netstat: unrecognized line {lineno}: {line!r}", line=lineno)
                name = _words_to_name(f"{m.group('pre')} {m.group('post')}")
        prefix = f"{section}.{subsection}." if subsection and _indent(line) > 4 else f"{section}."
        if _indent(line) <= 4:
            subsection = None
        key = prefix + name
        if key in counters:
            raise ParseError(f"netstat: duplicate counter {key!r} at line {lineno}", line=lineno)
        counters[key] = int(m.group("value"))
    return counters


def _indent(line: str) -> int:
    return len(line) - len(line.lstrip(" \t"))


def parse_counter_snapshot(text, kind: str) -> CounterMap:
    """Parse one snapshot into ``name -> value``.

    netstat sections are flattened with dotted prefixes and the
    ``<value> <words>`` lines are keyed by their hyphen-joined words, so
    ``Udp:`` / ``7000 receive buffer errors`` becomes
    ``Udp.receive-buffer-errors``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown counter source {kind!r}")
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    lines = text.splitlines()
    counters = _parse_ethtool(lines) if kind == "ethtool" else _parse_netstat(lines)
    return CounterMap(kind, counters)


def render_counter_snapshot(counters: CounterMap) -> str:
    """Text in the tool's own format; inverse of :func:`parse_counter_snapshot`."""
    if counters.kind == "ethtool":
        body = "".join(f"     {k}: {v}\n" for k, v in counters.counters.items())
        return "NIC statistics:\n" + body
    sections = {}
    for key, value in counters.counters.items():
        section, _, name = key.partition(".")
        sections.setdefault(section, []).append((name, value))
    out = []
    for section, items in sections.items():
        out.append(f"{section}:\n")
        for name, value in items:
            out.append(f"    {value} {name.replace('-', ' ')}\n")
    return "".join(out)


def diff_counters(before: CounterMap, after: CounterMap) -> CounterDelta:
    """``after - before`` per shared counter; one-sided counters are flagged."""
    if before.kind != after.kind:
        raise ValueError(f"cannot diff {before.kind} snapshot against {after.kind} snapshot")
    deltas = {}
    missing = {}
    for name, value in before.counters.items():
        if name in after.counters:
            deltas[name] = after.counters[name] - value
        else:
            missing[name] = "after"
    for name in after.counters:
        if name not in before.counters:
            missing[name] = "before"
    return CounterDelta(deltas, missing)
