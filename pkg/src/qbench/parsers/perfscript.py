"""``perf script`` stack dumps."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

UNKNOWN = "[unknown]"

_HEADER = re.compile(
    r"^(?P<comm>\S.*?)\s+(?P<pid>\d{1,10})(?:/(?P<tid>\d{1,10}))?\s+"
    r"(?:\[(?P<cpu>\d{1,6})\]\s+)?(?P<time>\d+\.\d+):\s*(?P<rest>.*)$"
)
_FRAME = re.compile(r"^(?P<addr>[0-9a-fA-F]+)\s+(?P<sym>.+?)(?:\s+\((?P<dso>[^()]*)\))?\s*$")
_OFFSET = re.compile(r"\+0x[0-9a-fA-F]+$")


@dataclass(frozen=True)
class PerfSample:
    command: str
    pid: int
    leaf: str
    chain: tuple = ()  # leaf first, outermost caller last
    time: Optional[float] = None
    cpu: Optional[int] = None
    tid: Optional[int] = None
    weight: int = 1
    truncated: bool = False

    @property
    def unknown(self) -> bool:
        return self.leaf == UNKNOWN


def _symbol(raw: str) -> str:
    sym = _OFFSET.sub("", raw.strip())
    if not sym or sym in ("[unknown]", "unknown"):
        return UNKNOWN
    return sym


def _frame(line: str) -> Optional[str]:
    m = _FRAME.match(line.strip())
    return _symbol(m.group("sym")) if m else None


def parse_perf_script(text) -> list:
    """One :class:`PerfSample` per stack; the first frame is the leaf.

    Samples without a call chain take their symbol from the header line when
    perf printed it inline.  A stack cut off at end of input is kept with
    ``truncated`` set.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    samples = []
    current = None  # [header match, frames, inline symbol]
    has_chains = False

    def flush(truncated=False):
        nonlocal current
        if current is None:
            return
        m, frames, inline = current
        chain = tuple(frames) if frames else ((inline,) if inline else ())
        leaf = chain[0] if chain else UNKNOWN
        samples.append(
            PerfSample(
                command=m.group("comm").strip(),
                pid=int(m.group("pid")),
                leaf=leaf,
                chain=chain,
                time=float(m.group("time")),
                cpu=int(m.group("cpu")) if m.group("cpu") else None,
                tid=int(m.group("tid")) if m.group("tid") else None,
                truncated=truncated,
            )
        )
        current = None

    for line in text.splitlines():
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        if not line[:1].isspace():
            m = _HEADER.match(line)
            if m:
                flush()
                parts = re.split(r":\s+", m.group("rest"), maxsplit=1)
                inline = _frame(parts[1]) if len(parts) == 2 and parts[1] else None
                current = [m, [], inline]
                continue
        if current is not None:
            sym = _frame(line)
            if sym is not None:
                current[1].append(sym)
                has_chains = True
    if current is not None:
        # a call-chain dump ends every stack with a blank line
        flush(truncated=has_chains or not current[1] and not current[2])
    return samples
