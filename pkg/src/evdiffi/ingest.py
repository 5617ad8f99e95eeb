"""Charging-session ingestion: parsing, validation, cleaning and serialization.

Two CSV files describe a corpus:

- ``sessions_meta.csv``: ``session_id,station_id,start_time,end_time,energy_kwh,co2_kg``
- ``sessions_signals.csv``: ``session_id,timestamp,power_kw,temperature_c``

Signals are in long format (one row per sample). A blank power or temperature
cell means that channel has no sample at that timestamp; the two channels are
inner-joined on timestamps before a session is accepted.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

META_HEADER = ("session_id", "station_id", "start_time", "end_time", "energy_kwh", "co2_kg")
SIGNALS_HEADER = ("session_id", "timestamp", "power_kw", "temperature_c")

MIN_SIGNAL_LENGTH = 3

# Machine-readable drop reasons.
MISSING_SIGNAL = "missing signal"
TOO_SHORT = "too short"
NON_FINITE = "non-finite value"
TIMESTAMP_DISORDER = "timestamp disorder"
MISSING_METADATA_FIELD = "missing metadata field"
INVALID_METADATA = "invalid metadata"
MISSING_METADATA = "missing metadata"
EMPTY_INTERSECTION = "empty intersection"

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_FRACTION = re.compile(r"\.(\d+)")


class IngestError(ValueError):
    """Fatal problem with an input file (unreadable, bad header, duplicate ids)."""


class AlignmentError(ValueError):
    """Raised when two signals cannot be put on a common timestamp grid."""


def parse_timestamp(text: str) -> int:
    """Parse an RFC 3339 UTC timestamp into integer microseconds since the epoch."""
    s = text.strip()
    if not s:
        raise ValueError("empty timestamp")
    if s[-1] in "zZ":
        s = s[:-1] + "+00:00"
    # fromisoformat only takes 3 or 6 fractional digits before Python 3.11
    s = _FRACTION.sub(lambda m: "." + m.group(1)[:6].ljust(6, "0"), s, count=1)
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None or dt.utcoffset().total_seconds() != 0:
        raise ValueError(f"timestamp is not UTC: {text!r}")
    delta = dt - _EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds


def format_timestamp(us: int) -> str:
    """Format integer microseconds since the epoch as RFC 3339 UTC."""
    us = int(us)
    dt = datetime.fromtimestamp(us // 1_000_000, tz=timezone.utc)
    text = dt.strftime("%Y-%m-%dT%H:%M:%S")
    frac = us % 1_000_000
    if frac:
        text += f".{frac:06d}"
    return text + "Z"


@dataclass(frozen=True, eq=False)
class SignalSeries:
    """Sampled signal. ``timestamps`` are int64 microseconds since the epoch."""

    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if ts.ndim != 1 or vals.shape != ts.shape:
            raise ValueError("timestamps and values must be 1-D and of equal length")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignalSeries):
            return NotImplemented
        return np.array_equal(self.timestamps, other.timestamps) and np.array_equal(
            self.values, other.values
        )

    def is_strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) > 0))


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    station_id: str
    start_time: int  # microseconds since epoch, UTC
    end_time: int
    energy_kwh: float
    co2_kg: float
    power: SignalSeries
    temperature: SignalSeries

    @property
    def duration_s(self) -> float:
        return (self.end_time - self.start_time) / 1e6


@dataclass(frozen=True)
class DropReport:
    session_id: str
    reason: str

    def to_json(self) -> str:
        return json.dumps({"session_id": self.session_id, "reason": self.reason})


@dataclass
class ParseResult:
    sessions: list[SessionRecord] = field(default_factory=list)
    dropped: list[DropReport] = field(default_factory=list)


def align_signals(
    power: SignalSeries, temperature: SignalSeries
) -> tuple[SignalSeries, SignalSeries]:
    """Inner-join two series on their timestamps.

    Identical grids are returned unchanged. Raises :class:`AlignmentError` if
    the grids share no timestamp or fewer than ``MIN_SIGNAL_LENGTH`` of them.
    """
    if np.array_equal(power.timestamps, temperature.timestamps):
        common = power.timestamps
    else:
        common = np.intersect1d(power.timestamps, temperature.timestamps, assume_unique=True)
    if common.size == 0:
        raise AlignmentError(EMPTY_INTERSECTION)
    if common.size < MIN_SIGNAL_LENGTH:
        raise AlignmentError(TOO_SHORT)
    if common.size == len(power) and common.size == len(temperature):
        return power, temperature
    p_idx = np.searchsorted(power.timestamps, common)
    t_idx = np.searchsorted(temperature.timestamps, common)
    return (
        SignalSeries(common, power.values[p_idx]),
        SignalSeries(common, temperature.values[t_idx]),
    )


def _open_csv(path: Path, expected: Sequence[str]) -> tuple[object, csv.reader]:
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(handle)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != tuple(expected):
        handle.close()
        raise IngestError(f"malformed header in {path}: expected {','.join(expected)}, got {header}")
    return handle, reader


def _parse_float(text: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    return float(text)


def _read_metadata(path: Path) -> tuple[dict[str, dict], list[DropReport]]:
    rows: dict[str, dict] = {}
    dropped: list[DropReport] = []
    handle, reader = _open_csv(path, META_HEADER)
    with handle:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(META_HEADER):
                raise IngestError(f"{path}:{lineno}: expected {len(META_HEADER)} fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise IngestError(f"{path}:{lineno}: empty session_id")
            if sid in rows:
                raise IngestError(f"{path}:{lineno}: duplicate session_id {sid!r}")
            fields = dict(zip(META_HEADER, (c.strip() for c in row)))
            rows[sid] = fields
    return rows, dropped


def _validate_metadata(fields: dict) -> tuple[dict | None, str | None]:
    if any(fields[k] == "" for k in META_HEADER):
        return None, MISSING_METADATA_FIELD
    try:
        start = parse_timestamp(fields["start_time"])
        end = parse_timestamp(fields["end_time"])
        energy = float(fields["energy_kwh"])
        co2 = float(fields["co2_kg"])
    except ValueError:
        return None, INVALID_METADATA
    if not (math.isfinite(energy) and math.isfinite(co2)):
        return None, NON_FINITE
    if end <= start or energy < 0 or co2 < 0:
        return None, INVALID_METADATA
    return {
        "station_id": fields["station_id"],
        "start_time": start,
        "end_time": end,
        "energy_kwh": energy,
        "co2_kg": co2,
    }, None


def _read_signals(path: Path) -> tuple[dict[str, list[tuple[int, float | None, float | None]]], dict[str, str]]:
    samples: dict[str, list] = {}
    bad: dict[str, str] = {}
    handle, reader = _open_csv(path, SIGNALS_HEADER)
    with handle:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(SIGNALS_HEADER):
                raise IngestError(f"{path}:{lineno}: expected {len(SIGNALS_HEADER)} fields, got {len(row)}")
            sid = row[0].strip()
            samples.setdefault(sid, [])
            if sid in bad:
                continue
            try:
                ts = parse_timestamp(row[1])
            except ValueError:
                bad[sid] = TIMESTAMP_DISORDER
                continue
            try:
                power = _parse_float(row[2])
                temp = _parse_float(row[3])
            except ValueError:
                bad[sid] = NON_FINITE
                continue
            if (power is not None and not math.isfinite(power)) or (
                temp is not None and not math.isfinite(temp)
            ):
                bad[sid] = NON_FINITE
                continue
            samples[sid].append((ts, power, temp))
    return samples, bad


def _build_series(rows: list[tuple[int, float | None, float | None]]) -> tuple[SignalSeries, SignalSeries] | str:
    ts = np.array([r[0] for r in rows], dtype=np.int64)
    if ts.size > 1 and not np.all(np.diff(ts) > 0):
        return TIMESTAMP_DISORDER
    p_rows = [(r[0], r[1]) for r in rows if r[1] is not None]
    t_rows = [(r[0], r[2]) for r in rows if r[2] is not None]
    if not p_rows or not t_rows:
        return MISSING_SIGNAL
    power = SignalSeries(np.array([r[0] for r in p_rows]), np.array([r[1] for r in p_rows]))
    temperature = SignalSeries(np.array([r[0] for r in t_rows]), np.array([r[1] for r in t_rows]))
    if len(power) < MIN_SIGNAL_LENGTH or len(temperature) < MIN_SIGNAL_LENGTH:
        return TOO_SHORT
    try:
        return align_signals(power, temperature)
    except AlignmentError as exc:
        return str(exc)


def parse_sessions(metadata_file: str | Path, signals_file: str | Path) -> ParseResult:
    """Read a session corpus, keeping only complete, valid sessions.

    Sessions are returned in metadata-file order. Every rejected session gets a
    :class:`DropReport`; signal rows whose session has no metadata row are
    reported with reason ``"missing metadata"``.

    Raises:
        IngestError: unreadable file, malformed header or row, or a duplicate
            ``session_id`` in the metadata file.
    """
    meta, dropped = _read_metadata(Path(metadata_file))
    signals, bad_signals = _read_signals(Path(signals_file))
    result = ParseResult(dropped=dropped)

    for sid, fields in meta.items():
        parsed, reason = _validate_metadata(fields)
        if reason is None and sid in bad_signals:
            reason = bad_signals[sid]
        if reason is None and not signals.get(sid):
            reason = MISSING_SIGNAL
        if reason is None:
            built = _build_series(signals[sid])
            if isinstance(built, str):
                reason = built
        if reason is not None:
            result.dropped.append(DropReport(sid, reason))
            continue
        power, temperature = built
        result.sessions.append(SessionRecord(session_id=sid, power=power, temperature=temperature, **parsed))

    for sid in signals:
        if sid not in meta:
            result.dropped.append(DropReport(sid, MISSING_METADATA))
    return result


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_sessions(sessions: Iterable[SessionRecord], metadata_file: str | Path, signals_file: str | Path) -> None:
    """Serialize sessions to the two-file CSV layout read by :func:`parse_sessions`."""
    sessions = list(sessions)
    with open(metadata_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for s in sessions:
            w.writerow(
                [
                    s.session_id,
                    s.station_id,
                    format_timestamp(s.start_time),
                    format_timestamp(s.end_time),
                    _fmt_float(s.energy_kwh),
                    _fmt_float(s.co2_kg),
                ]
            )
    with open(signals_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIGNALS_HEADER)
        for s in sessions:
            if not np.array_equal(s.power.timestamps, s.temperature.timestamps):
                raise ValueError(f"session {s.session_id}: signals are not aligned")
            for ts, p, t in zip(s.power.timestamps, s.power.values, s.temperature.values):
                w.writerow([s.session_id, format_timestamp(ts), _fmt_float(p), _fmt_float(t)])


def write_drop_report(dropped: Iterable[DropReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dropped:
            fh.write(d.to_json() + "\n")
