"""EDF signal files and plain-text hypnograms.

EDF layout: a 256-byte fixed header, then 256 bytes of header per signal,
then data records of 16-bit little-endian two's-complement samples with a
per-signal linear digital-to-physical calibration.

Hypnograms are UTF-8 text, one `epoch_index<TAB>stage_token` line per
30-second epoch, tokens from {W, N1, N2, N3, REM, S1, S2, S3, S4, MT, A}
('A' marks an artifact epoch).  Unknown tokens parse to UNKNOWN.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    BadCalibration,
    GapInEpochs,
    MalformedLine,
    NonNumericField,
    RangeOverflow,
    TruncatedHeader,
)


class StageCode(Enum):
    W = "W"
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    REM = "REM"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    MT = "MT"
    UNKNOWN = "UNKNOWN"


_STAGE_TOKENS = {
    "W": StageCode.W, "N1": StageCode.N1, "N2": StageCode.N2,
    "N3": StageCode.N3, "REM": StageCode.REM, "S1": StageCode.S1,
    "S2": StageCode.S2, "S3": StageCode.S3, "S4": StageCode.S4,
    "MT": StageCode.MT, "A": StageCode.MT,
}


@dataclass
class Calibration:
    """Linear digital-to-physical mapping of one EDF signal."""
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        scale = (self.physical_max - self.physical_min) / \
            (self.digital_max - self.digital_min)
        return (digital.astype(np.float64) - self.digital_min) * scale \
            + self.physical_min

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        scale = (self.digital_max - self.digital_min) / \
            (self.physical_max - self.physical_min)
        return np.rint((physical - self.physical_min) * scale).astype(np.int64) \
            + self.digital_min


@dataclass
class ChannelSeries:
    label: str
    sampling_rate: float
    physical_unit: str
    samples: np.ndarray
    calibration: Calibration | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not 1 <= self.sampling_rate <= 10000:
            raise ValueError(f"sampling rate {self.sampling_rate} out of range")
        if self.samples.size == 0:
            raise ValueError(f"channel {self.label} has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"channel {self.label} has non-finite samples")


@dataclass
class Recording:
    patient_id: str
    channels: list[ChannelSeries]
    start_time: str = "2000-01-01T00:00:00"

    def __post_init__(self):
        if not self.channels:
            raise ValueError("recording has no channels")
        labels = [c.label for c in self.channels]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate channel labels in {labels}")

    def channel(self, label: str) -> ChannelSeries:
        for c in self.channels:
            if c.label == label:
                return c
        raise KeyError(label)

    def duration_seconds(self) -> float:
        return max(len(c.samples) / c.sampling_rate for c in self.channels)


@dataclass
class Hypnogram:
    stages: list[StageCode]
    epoch_seconds: int = 30
    artifact_intervals: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("hypnogram has no epochs")
        if self.epoch_seconds <= 0:
            raise ValueError("epoch length must be positive")
        for lo, hi in self.artifact_intervals:
            if lo < 0 or lo >= hi:
                raise ValueError(f"bad artifact interval ({lo}, {hi})")

    def duration_seconds(self) -> float:
        return len(self.stages) * self.epoch_seconds


# --- EDF parsing ------------------------------------------------------------

def _ascii(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").strip()


def _num(raw: bytes, kind, what: str):
    text = _ascii(raw)
    try:
        return kind(float(text)) if kind is int else kind(text)
    except ValueError as exc:
        raise NonNumericField(f"{what}: {text!r}") from exc


def parse_edf(data: bytes) -> Recording:
    """Parse EDF bytes into a Recording of physical-valued channels."""
    if len(data) < 256:
        raise TruncatedHeader(f"{len(data)} bytes is shorter than the "
                              "256-byte fixed header")
    patient_field = _ascii(data[8:88])
    start_date = _ascii(data[168:176])
    start_time = _ascii(data[176:184])
    header_bytes = _num(data[184:192], int, "header byte count")
    n_records = _num(data[236:244], int, "record count")
    record_duration = _num(data[244:252], float, "record duration")
    n_signals = _num(data[252:256], int, "signal count")
    if len(data) < header_bytes:
        raise TruncatedHeader(f"{len(data)} bytes but header declares "
                              f"{header_bytes}")
    if header_bytes != 256 * (1 + n_signals):
        raise TruncatedHeader(
            f"header byte count {header_bytes} does not match "
            f"{n_signals} signals")

    def column(offset: int, width: int, i: int) -> bytes:
        base = 256 + offset * n_signals
        return data[base + i * width: base + (i + 1) * width]

    labels, units, cals, sprs = [], [], [], []
    for i in range(n_signals):
        labels.append(_ascii(column(0, 16, i)))
        units.append(_ascii(column(96, 8, i)))
        pmin = _num(column(104, 8, i), float, f"physical min of signal {i}")
        pmax = _num(column(112, 8, i), float, f"physical max of signal {i}")
        dmin = _num(column(120, 8, i), int, f"digital min of signal {i}")
        dmax = _num(column(128, 8, i), int, f"digital max of signal {i}")
        if dmin == dmax:
            raise BadCalibration(f"signal {i} has digital_min == digital_max "
                                 f"== {dmin}")
        cals.append(Calibration(pmin, pmax, dmin, dmax))
        sprs.append(_num(column(216, 8, i), int,
                         f"samples per record of signal {i}"))

    record_size = 2 * sum(sprs)
    payload = data[header_bytes:]
    if n_records < 0:   # unknown count: infer from the payload
        n_records = len(payload) // record_size if record_size else 0
    if len(payload) < n_records * record_size:
        raise TruncatedHeader(
            f"payload holds {len(payload)} bytes but {n_records} records "
            f"of {record_size} bytes are declared")

    raw = np.frombuffer(payload[:n_records * record_size], dtype="<i2")
    raw = raw.reshape(n_records, record_size // 2)
    channels = []
    col = 0
    for i in range(n_signals):
        digital = raw[:, col:col + sprs[i]].reshape(-1)
        col += sprs[i]
        if record_duration <= 0:
            raise NonNumericField(f"record duration {record_duration}")
        channels.append(ChannelSeries(
            label=labels[i],
            sampling_rate=sprs[i] / record_duration,
            physical_unit=units[i],
            samples=cals[i].to_physical(digital),
            calibration=cals[i],
        ))
    return Recording(
        patient_id=patient_field.split(" ")[0] if patient_field else "X",
        channels=channels,
        start_time=_edf_datetime_to_iso(start_date, start_time),
    )


def _edf_datetime_to_iso(date_field: str, time_field: str) -> str:
    try:
        dd, mm, yy = (int(v) for v in date_field.split("."))
        hh, mi, ss = (int(v) for v in time_field.split("."))
        year = 1900 + yy if yy >= 85 else 2000 + yy
        return _dt.datetime(year, mm, dd, hh, mi, ss).isoformat()
    except (ValueError, TypeError):
        return "2000-01-01T00:00:00"


# --- EDF writing ------------------------------------------------------------

def _pad(text: str, width: int) -> bytes:
    raw = text.encode("ascii", errors="replace")[:width]
    return raw + b" " * (width - len(raw))


def _fmt8(value: float) -> str:
    text = f"{value:.8g}"
    if len(text) > 8:
        text = f"{value:.6g}"
    if len(text) > 8:
        text = f"{value:.2e}"
    return text[:8]


def _auto_calibration(samples: np.ndarray) -> Calibration:
    peak = float(np.max(np.abs(samples)))
    peak = max(peak, 1e-6)
    # round the range up to two significant digits so the header field
    # re-parses to the exact same float
    span = float(_fmt8(peak * 1.01))
    return Calibration(-span, span, -32768, 32767)


def write_edf(recording: Recording, record_duration: float = 1.0) -> bytes:
    """Serialize a Recording to EDF bytes.

    Each channel must contain a whole number of records of
    `sampling_rate * record_duration` samples, with equal record counts
    across channels.  Channels carrying a stored calibration reuse it
    (raising RangeOverflow if a sample falls outside its physical range);
    otherwise a symmetric range covering the data is chosen.
    """
    sprs = []
    counts = []
    for c in recording.channels:
        spr = c.sampling_rate * record_duration
        if abs(spr - round(spr)) > 1e-9 or round(spr) < 1:
            raise ValueError(
                f"channel {c.label}: rate {c.sampling_rate} does not fit "
                f"whole records of {record_duration}s")
        spr = int(round(spr))
        if len(c.samples) % spr:
            raise ValueError(
                f"channel {c.label}: {len(c.samples)} samples is not a "
                f"whole number of {spr}-sample records")
        sprs.append(spr)
        counts.append(len(c.samples) // spr)
    if len(set(counts)) != 1:
        raise ValueError(f"channels disagree on record count: {counts}")
    n_records = counts[0]
    n_signals = len(recording.channels)

    cals = []
    digitals = []
    for c in recording.channels:
        cal = c.calibration or _auto_calibration(c.samples)
        lo = min(c.samples.min(), 0.0)
        hi = c.samples.max()
        if lo < cal.physical_min - 1e-9 or hi > cal.physical_max + 1e-9:
            raise RangeOverflow(
                f"channel {c.label}: samples span [{lo:.6g}, {hi:.6g}] "
                f"outside physical range [{cal.physical_min:.6g}, "
                f"{cal.physical_max:.6g}]")
        cals.append(cal)
        digitals.append(cal.to_digital(c.samples).astype("<i2"))

    try:
        start = _dt.datetime.fromisoformat(recording.start_time)
    except ValueError:
        start = _dt.datetime(2000, 1, 1)
    head = bytearray()
    head += _pad("0", 8)
    head += _pad(recording.patient_id, 80)
    head += _pad("somnium synthetic recording", 80)
    head += _pad(start.strftime("%d.%m.%y"), 8)
    head += _pad(start.strftime("%H.%M.%S"), 8)
    head += _pad(str(256 * (1 + n_signals)), 8)
    head += _pad("", 44)
    head += _pad(str(n_records), 8)
    head += _pad(_fmt8(record_duration), 8)
    head += _pad(str(n_signals), 4)

    def column(values):
        return b"".join(values)

    head += column(_pad(c.label, 16) for c in recording.channels)
    head += column(_pad("synthetic", 80) for _ in recording.channels)
    head += column(_pad(c.physical_unit, 8) for c in recording.channels)
    head += column(_pad(_fmt8(cal.physical_min), 8) for cal in cals)
    head += column(_pad(_fmt8(cal.physical_max), 8) for cal in cals)
    head += column(_pad(str(cal.digital_min), 8) for cal in cals)
    head += column(_pad(str(cal.digital_max), 8) for cal in cals)
    head += column(_pad("", 80) for _ in recording.channels)
    head += column(_pad(str(spr), 8) for spr in sprs)
    head += column(_pad("", 32) for _ in recording.channels)

    body = bytearray()
    views = [d.reshape(n_records, spr) for d, spr in zip(digitals, sprs)]
    for rec in range(n_records):
        for v in views:
            body += v[rec].tobytes()
    return bytes(head + body)


# --- hypnograms -------------------------------------------------------------

def parse_hypnogram(text: str, epoch_seconds: int = 30) -> Hypnogram:
    """Parse `epoch<TAB>stage` lines; artifact epochs ('A'/'MT') become MT
    stages plus an artifact interval spanning the epoch."""
    stages: list[StageCode] = []
    intervals: list[tuple[float, float]] = []
    expected = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].strip():
            raise MalformedLine(f"line {lineno}: {line!r}")
        try:
            idx = int(parts[0])
        except ValueError as exc:
            raise MalformedLine(f"line {lineno}: bad epoch index "
                                f"{parts[0]!r}") from exc
        if idx != expected:
            raise GapInEpochs(f"line {lineno}: expected epoch {expected}, "
                              f"found {idx}")
        expected += 1
        token = parts[1].strip()
        stage = _STAGE_TOKENS.get(token, StageCode.UNKNOWN)
        stages.append(stage)
        if token in ("A", "MT"):
            intervals.append((float(idx * epoch_seconds),
                              float((idx + 1) * epoch_seconds)))
    if not stages:
        raise MalformedLine("hypnogram text contains no epochs")
    return Hypnogram(stages=stages, epoch_seconds=epoch_seconds,
                     artifact_intervals=intervals)


def _covered(h: Hypnogram, idx: int) -> bool:
    lo = idx * h.epoch_seconds
    hi = (idx + 1) * h.epoch_seconds
    return any(a <= lo and hi <= b for a, b in h.artifact_intervals)


def write_hypnogram(h: Hypnogram) -> str:
    """Serialize a hypnogram; artifact-covered MT epochs emit 'A', other MT
    epochs 'MT', UNKNOWN emits '?' (which parses back to UNKNOWN)."""
    lines = []
    for idx, stage in enumerate(h.stages):
        if stage is StageCode.MT:
            token = "A" if _covered(h, idx) else "MT"
        elif stage is StageCode.UNKNOWN:
            token = "?"
        else:
            token = stage.value
        lines.append(f"{idx}\t{token}")
    return "\n".join(lines) + "\n"
