"""ACK and packet counts from qlog event streams.

Accepts whole-file JSON qlog (``{"traces": [...]}``, both the list-style
events of early drafts and the object-style events of later ones) and
streamed framings: newline-delimited JSON and JSON-SEQ (records separated by
0x1E).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import ParseError

ACK_FRAME_TYPES = frozenset({"ack", "ack_ecn"})
_RS = "\x1e"


@dataclass(frozen=True)
class AckStats:
    ack_frames_sent: int = 0
    packets_sent: int = 0
    packets_received: int = 0
    skipped_events: int = 0

    def __add__(self, other: "AckStats") -> "AckStats":
        return AckStats(
            self.ack_frames_sent + other.ack_frames_sent,
            self.packets_sent + other.packets_sent,
            self.packets_received + other.packets_received,
            self.skipped_events + other.skipped_events,
        )


def _event_name(ev, fields):
    """(name, data) of one event in any supported shape, or None."""
    if isinstance(ev, dict):
        data = ev.get("data", {})
        name = ev.get("name")
        if name is None and "event" in ev:
            name = ev["event"]
        if not isinstance(name, str):
            return None
        return name.rsplit(":", 1)[-1], data
    if isinstance(ev, list) and fields:
        row = dict(zip(fields, ev))
        name = row.get("event")
        if not isinstance(name, str):
            return None
        return name, row.get("data", {})
    return None


def _has_ack(data) -> bool:
    frames = data.get("frames") if isinstance(data, dict) else None
    if not isinstance(frames, list):
        return False
    return any(isinstance(f, dict) and f.get("frame_type") in ACK_FRAME_TYPES for f in frames)


def _tally(events, fields=None):
    acks = sent = received = skipped = 0
    for ev in events:
        parsed = _event_name(ev, fields)
        if parsed is None:
            skipped += 1
            continue
        name, data = parsed
        if name == "packet_sent":
            sent += 1
            if _has_ack(data):
                acks += 1
        elif name == "packet_received":
            received += 1
    return AckStats(acks, sent, received, skipped)


def _load_json(text: str):
    try:
        return json.loads(text)
    except RecursionError:
        raise ParseError("qlog: nesting too deep") from None


def _count_blob(text: str) -> AckStats:
    if not text.strip():
        return AckStats()
    try:
        doc = _load_json(text)
    except ValueError:
        doc = None
    if doc is not None:
        if isinstance(doc, dict) and isinstance(doc.get("traces"), list):
            total = AckStats()
            for trace in doc["traces"]:
                if not isinstance(trace, dict) or not isinstance(trace.get("events", []), list):
                    raise ParseError("qlog: trace without an event list")
                fields = trace.get("event_fields")
                if fields is not None and not isinstance(fields, list):
                    raise ParseError("qlog: event_fields must be a list")
                total = total + _tally(trace.get("events", []), fields)
            return total
        if isinstance(doc, dict) and isinstance(doc.get("trace"), dict) and "events" not in doc:
            return AckStats()  # JSON-SEQ header record alone
        if isinstance(doc, dict) and ("name" in doc or "event" in doc):
            return _tally([doc])
        raise ParseError("qlog: JSON document has no traces")

    records = [r for chunk in text.split(_RS) for r in chunk.splitlines() if r.strip()]
    events = []
    bad = 0
    for rec in records:
        try:
            obj = _load_json(rec)
        except ValueError:
            bad += 1
            continue
        if isinstance(obj, dict) and ("trace" in obj or "qlog_version" in obj or "qlog_format" in obj):
            continue  # stream header
        events.append(obj)
    if records and not events and bad == len(records):
        raise ParseError(f"qlog: none of {len(records)} records is JSON")
    stats = _tally(events)
    return AckStats(stats.ack_frames_sent, stats.packets_sent, stats.packets_received, stats.skipped_events + bad)


def count_acks_qlog(blobs) -> AckStats:
    """Count sent packets carrying at least one ACK frame, plus packet totals.

    ``blobs`` is one qlog document (str/bytes) or an iterable of them, all
    from the same endpoint.
    """
    if isinstance(blobs, (str, bytes, bytearray)):
        blobs = [blobs]
    total = AckStats()
    for blob in blobs:
        if isinstance(blob, (bytes, bytearray)):
            blob = bytes(blob).decode("utf-8", errors="replace")
        total = total + _count_blob(blob)
    return total
