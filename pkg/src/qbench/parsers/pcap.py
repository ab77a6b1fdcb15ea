"""UDP datagram counts per direction from a classic pcap capture."""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from typing import Optional

from . import ParseError

_MAGICS = {
    b"\xd4\xc3\xb2\xa1": ("<", 1e-6),
    b"\xa1\xb2\xc3\xd4": (">", 1e-6),
    b"\x4d\x3c\xb2\xa1": ("<", 1e-9),
    b"\xa1\xb2\x3c\x4d": (">", 1e-9),
}
_PCAPNG = b"\x0a\x0d\x0d\x0a"

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
LINKTYPE_LINUX_SLL2 = 276
_RAW_ALIASES = {12, 14, LINKTYPE_RAW}

_IPV6_EXT = {0, 43, 60}  # hop-by-hop, routing, destination options
_UDP = 17


@dataclass(frozen=True)
class DatagramCounts:
    to_endpoint: int = 0
    to_endpoint_bytes: int = 0
    from_endpoint: int = 0
    from_endpoint_bytes: int = 0
    skipped_frames: int = 0
    truncated: bool = False

    def as_pair(self) -> tuple:
        return self.to_endpoint, self.from_endpoint


def _l3(linktype: int, frame: bytes, order: str):
    """(ethertype-ish version, offset of the IP header) or None."""
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        off = 12
        etype = struct.unpack_from(">H", frame, off)[0]
        while etype in (0x8100, 0x88A8) and len(frame) >= off + 6:
            off += 4
            etype = struct.unpack_from(">H", frame, off)[0]
        return etype, off + 2
    if linktype in _RAW_ALIASES or linktype in (LINKTYPE_IPV4, LINKTYPE_IPV6):
        if not frame:
            return None
        version = frame[0] >> 4
        return {4: 0x0800, 6: 0x86DD}.get(version, 0), 0
    if linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            return None
        return struct.unpack_from(">H", frame, 14)[0], 16
    if linktype == LINKTYPE_LINUX_SLL2:
        if len(frame) < 20:
            return None
        return struct.unpack_from(">H", frame, 0)[0], 20
    if linktype == LINKTYPE_NULL:
        if len(frame) < 4:
            return None
        family = struct.unpack_from(order + "I", frame, 0)[0]
        if family == 2:
            return 0x0800, 4
        if family in (10, 24, 28, 30):
            return 0x86DD, 4
        return 0, 4
    return None


def _udp(etype: int, frame: bytes, off: int):
    """(src addr, src port, dst addr, dst port, payload length) or None."""
    if etype == 0x0800:
        if len(frame) < off + 20 or frame[off] >> 4 != 4:
            return None
        ihl = (frame[off] & 0x0F) * 4
        frag = struct.unpack_from(">H", frame, off + 6)[0] & 0x1FFF
        if frame[off + 9] != _UDP or frag != 0 or ihl < 20:
            return None
        src = ipaddress.IPv4Address(frame[off + 12:off + 16])
        dst = ipaddress.IPv4Address(frame[off + 16:off + 20])
        udp = off + ihl
    elif etype == 0x86DD:
        if len(frame) < off + 40 or frame[off] >> 4 != 6:
            return None
        nxt = frame[off + 6]
        src = ipaddress.IPv6Address(frame[off + 8:off + 24])
        dst = ipaddress.IPv6Address(frame[off + 24:off + 40])
        udp = off + 40
        while nxt in _IPV6_EXT and len(frame) >= udp + 2:
            nxt, hdr_len = frame[udp], (frame[udp + 1] + 1) * 8
            udp += hdr_len
        if nxt != _UDP:
            return None
    else:
        return None
    if len(frame) < udp + 8:
        return None
    sport, dport, length = struct.unpack_from(">HHH", frame, udp)
    return src, sport, dst, dport, max(length - 8, 0)


def count_datagrams(blob: bytes, address: Optional[str], port: int) -> DatagramCounts:
    """Count UDP datagrams sent to and from ``address:port``.

    ``address`` None matches any host on ``port``.  Payload bytes come from
    the UDP length field, so captures with a short snaplen still count full
    datagram sizes.
    """
    data = bytes(blob)
    if not data:
        return DatagramCounts()
    if data[:4] == _PCAPNG:
        raise ParseError("pcapng captures are not supported; write classic pcap (tcpdump -w)")
    if len(data) < 24 or data[:4] not in _MAGICS:
        raise ParseError("not a pcap file: bad magic or short global header")
    order, _ = _MAGICS[data[:4]]
    linktype = struct.unpack_from(order + "I", data, 20)[0] & 0x0FFFFFFF
    target = ipaddress.ip_address(address) if address else None

    to_n = to_b = from_n = from_b = skipped = 0
    truncated = False
    pos = 24
    while pos < len(data):
        if pos + 16 > len(data):
            truncated = True
            break
        incl_len = struct.unpack_from(order + "I", data, pos + 8)[0]
        start = pos + 16
        if start + incl_len > len(data):
            truncated = True
            break
        frame = data[start:start + incl_len]
        pos = start + incl_len
        l3 = _l3(linktype, frame, order)
        parsed = _udp(l3[0], frame, l3[1]) if l3 else None
        if parsed is None:
            skipped += 1
            continue
        src, sport, dst, dport, payload = parsed
        if dport == port and (target is None or dst == target):
            to_n += 1
            to_b += payload
        elif sport == port and (target is None or src == target):
            from_n += 1
            from_b += payload
    return DatagramCounts(to_n, to_b, from_n, from_b, skipped, truncated)
