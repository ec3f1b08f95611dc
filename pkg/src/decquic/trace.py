"""Canonical trace data types and the on-disk trace format.

A trace is stored as two JSON-lines files (one packet per line, one
response-start event per line) plus a row in a manifest CSV with columns
trace_id, server_id, packet_path, event_path.  Times are seconds relative
to trace start and are serialized with 9 decimal digits, so values carrying
at most nanosecond resolution round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import TraceParseError, TraceValidationError

CLIENT_TO_SERVER = "c2s"
SERVER_TO_CLIENT = "s2c"
_DIRECTIONS = (CLIENT_TO_SERVER, SERVER_TO_CLIENT)


@dataclass(frozen=True)
class PacketRecord:
    """One observed packet: relative time (s), length (bytes), direction."""

    t: float
    len: int
    dir: str

    def validate(self) -> None:
        if not (self.t >= 0.0):
            raise TraceValidationError(f"packet time must be >= 0, got {self.t}")
        if self.len < 1 or self.len > 65535:
            raise TraceValidationError(f"packet length must be in 1..65535, got {self.len}")
        if self.dir not in _DIRECTIONS:
            raise TraceValidationError(f"packet direction must be one of {_DIRECTIONS}, got {self.dir!r}")


@dataclass(frozen=True)
class ResponseEvent:
    """Ground-truth time (s) at which an HTTP/3 response starts."""

    t: float

    def validate(self) -> None:
        if not (self.t >= 0.0):
            raise TraceValidationError(f"event time must be >= 0, got {self.t}")


@dataclass
class Trace:
    """An observed connection: sorted packets plus response-start events.

    server_id is the grouping key for known/unknown-server splits.
    """

    trace_id: str
    server_id: str
    packets: list[PacketRecord] = field(default_factory=list)
    events: list[ResponseEvent] = field(default_factory=list)

    @property
    def duration_s(self) -> float:
        return self.packets[-1].t if self.packets else 0.0

    def validate(self) -> None:
        if not self.packets:
            raise TraceValidationError(f"trace {self.trace_id!r} has no packets")
        for p in self.packets:
            p.validate()
        for e in self.events:
            e.validate()
        for a, b in zip(self.packets, self.packets[1:]):
            if b.t < a.t:
                raise TraceValidationError(f"trace {self.trace_id!r} packets not sorted by time")
        for a, b in zip(self.events, self.events[1:]):
            if b.t < a.t:
                raise TraceValidationError(f"trace {self.trace_id!r} events not sorted by time")


def parse_trace(
    packet_stream: Iterable[str],
    event_stream: Iterable[str],
    trace_id: str,
    server_id: str,
) -> Trace:
    """Parse JSONL packet and event streams into a validated Trace.

    Packet lines look like {"t": 0.0, "len": 1292, "dir": "c2s"}; event lines
    {"t": 0.31}.  Records are sorted by t (stable, so equal-time input order
    is preserved).  Raises TraceParseError with the offending line number on
    malformed JSON, TraceValidationError on out-of-range values or an empty
    packet stream.
    """
    packets: list[PacketRecord] = []
    for lineno, line in enumerate(packet_stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"packet line {lineno}: invalid JSON ({exc.msg})") from exc
        try:
            rec = PacketRecord(t=float(obj["t"]), len=int(obj["len"]), dir=str(obj["dir"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(f"packet line {lineno}: missing or malformed field ({exc})") from exc
        rec.validate()
        packets.append(rec)

    events: list[ResponseEvent] = []
    for lineno, line in enumerate(event_stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"event line {lineno}: invalid JSON ({exc.msg})") from exc
        try:
            ev = ResponseEvent(t=float(obj["t"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceParseError(f"event line {lineno}: missing or malformed field ({exc})") from exc
        ev.validate()
        events.append(ev)

    if not packets:
        raise TraceValidationError(f"trace {trace_id!r}: empty packet stream")

    packets.sort(key=lambda p: p.t)
    events.sort(key=lambda e: e.t)
    return Trace(trace_id=trace_id, server_id=server_id, packets=packets, events=events)


def _fmt_t(t: float) -> str:
    return f"{t:.9f}"


def write_trace(trace: Trace) -> tuple[str, str]:
    """Serialize a Trace to (packet_stream, event_stream) JSONL text.

    Inverse of parse_trace; exact round-trip when times carry at most 9
    decimal digits.
    """
    pkt_lines = [
        f'{{"t":{_fmt_t(p.t)},"len":{p.len},"dir":"{p.dir}"}}\n' for p in trace.packets
    ]
    evt_lines = [f'{{"t":{_fmt_t(e.t)}}}\n' for e in trace.events]
    return "".join(pkt_lines), "".join(evt_lines)


@dataclass(frozen=True)
class ManifestRow:
    trace_id: str
    server_id: str
    packet_path: str
    event_path: str


MANIFEST_COLUMNS = ("trace_id", "server_id", "packet_path", "event_path")


def save_trace(trace: Trace, out_dir: Path | str) -> ManifestRow:
    """Write one trace's packet/event files under out_dir/traces/."""
    out_dir = Path(out_dir)
    tdir = out_dir / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    pkt_rel = f"traces/{trace.trace_id}.packets.jsonl"
    evt_rel = f"traces/{trace.trace_id}.events.jsonl"
    pkt_text, evt_text = write_trace(trace)
    (out_dir / pkt_rel).write_text(pkt_text)
    (out_dir / evt_rel).write_text(evt_text)
    return ManifestRow(trace.trace_id, trace.server_id, pkt_rel, evt_rel)


def write_manifest(rows: Iterable[ManifestRow], manifest_path: Path | str) -> None:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for row in rows:
            writer.writerow([row.trace_id, row.server_id, row.packet_path, row.event_path])


def read_manifest(manifest_path: Path | str) -> list[ManifestRow]:
    manifest_path = Path(manifest_path)
    rows: list[ManifestRow] = []
    with open(manifest_path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(
                ManifestRow(
                    trace_id=rec["trace_id"],
                    server_id=rec["server_id"],
                    packet_path=rec["packet_path"],
                    event_path=rec["event_path"],
                )
            )
    return rows


def load_trace(row: ManifestRow, base_dir: Path | str) -> Trace:
    """Load and parse the trace referenced by a manifest row (paths relative to base_dir)."""
    base_dir = Path(base_dir)
    pkt_path = base_dir / row.packet_path
    evt_path = base_dir / row.event_path
    with open(pkt_path) as pf, open(evt_path) as ef:
        return parse_trace(pf, ef, trace_id=row.trace_id, server_id=row.server_id)


def iter_traces(manifest_path: Path | str) -> Iterator[Trace]:
    """Yield traces listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    for row in read_manifest(manifest_path):
        yield load_trace(row, base)
