"""Recording-to-segments preprocessing chain.

Order of operations (fixed): stage-code standardization, artifact excision,
Butterworth band-pass (zero phase), per-channel whole-recording z-score,
stage segmentation, resampling to the target rate, fixed 10-second windows.

Outputs are per-stage `SegmentBatch`es (stage buckets N1/N2/N3/REM plus the
whole-night ALL bucket) and a documented binary segment store:

    magic b"SOMNSEG1" | u32 version | u32 N | u32 d | u32 T
    | N*d*T little-endian float32 values
    | u32 json_len | UTF-8 JSON metadata
        {"stage", "sampling_rate", "patients": [...], "labels": [...] | null}

plus one `index.json` per store directory mapping stage -> patient ->
contiguous [start, end) segment ranges.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.signal

from .errors import (
    BadSpec,
    ChannelMissing,
    DegenerateSignal,
    EmptyInput,
    IntervalOutOfRange,
    MissingStore,
    UnstableDesign,
)
from .edfio import ChannelSeries, Hypnogram, Recording, StageCode

STAGE_BUCKETS = ("N1", "N2", "N3", "REM")
ALL_BUCKET = "ALL"
DEFAULT_CHANNEL_ORDER = ("C3-A2", "C4-A1", "F4-A1", "O2-A1")


@dataclass
class FilterSpec:
    low_cut: float = 0.3
    high_cut: float = 35.0
    order: int = 4
    zero_phase: bool = True


@dataclass
class PreprocessConfig:
    filter: FilterSpec = field(default_factory=FilterSpec)
    target_rate: float = 128.0
    segment_seconds: float = 10.0
    channel_order: tuple = DEFAULT_CHANNEL_ORDER


@dataclass
class SegmentBatch:
    """Fixed-length multichannel segments with per-segment provenance."""
    values: np.ndarray                 # [N, d, T] float
    patient_ids: list[str]
    stage: str
    labels: np.ndarray | None = None   # int class per segment (0/1)
    label_mask: np.ndarray | None = None
    sampling_rate: float = 128.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("segment batch must be [N, d, T]")
        if len(self.patient_ids) != self.values.shape[0]:
            raise ValueError("one patient id per segment required")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise ValueError("one label per segment required")
        if self.label_mask is None:
            self.label_mask = np.ones(self.values.shape[0], dtype=bool)
        else:
            self.label_mask = np.asarray(self.label_mask, dtype=bool)
        if self.labels is None and self.label_mask.any() and self.n:
            # a mask only means something when labels exist
            self.label_mask = np.zeros(self.values.shape[0], dtype=bool)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def subset(self, idx) -> "SegmentBatch":
        idx = np.asarray(idx)
        return SegmentBatch(
            values=self.values[idx],
            patient_ids=[self.patient_ids[i] for i in idx],
            stage=self.stage,
            labels=None if self.labels is None else self.labels[idx],
            label_mask=self.label_mask[idx],
            sampling_rate=self.sampling_rate,
        )

    @staticmethod
    def concatenate(batches: list["SegmentBatch"]) -> "SegmentBatch":
        batches = [b for b in batches if b.n]
        if not batches:
            raise EmptyInput("no segments to concatenate")
        stage = batches[0].stage
        labels = None
        if all(b.labels is not None for b in batches):
            labels = np.concatenate([b.labels for b in batches])
        return SegmentBatch(
            values=np.concatenate([b.values for b in batches], axis=0),
            patient_ids=[p for b in batches for p in b.patient_ids],
            stage=stage,
            labels=labels,
            label_mask=np.concatenate([b.label_mask for b in batches]),
            sampling_rate=batches[0].sampling_rate,
        )


@dataclass
class PreprocessStats:
    epochs_total: int = 0
    epochs_artifact: int = 0
    epochs_wake: int = 0
    short_spans: int = 0
    segments_per_stage: dict = field(default_factory=dict)


# --- stage standardization --------------------------------------------------

_LEGACY = {StageCode.S1: StageCode.N1, StageCode.S2: StageCode.N2,
           StageCode.S3: StageCode.N3, StageCode.S4: StageCode.N3}


def standardize_stages(h: Hypnogram) -> Hypnogram:
    """Map legacy S1/S2 to N1/N2, S3/S4 to N3; MT epochs become UNKNOWN and
    gain an artifact interval covering the epoch."""
    stages = []
    intervals = list(h.artifact_intervals)
    for idx, s in enumerate(h.stages):
        if s in _LEGACY:
            stages.append(_LEGACY[s])
        elif s is StageCode.MT:
            stages.append(StageCode.UNKNOWN)
            lo = float(idx * h.epoch_seconds)
            hi = float((idx + 1) * h.epoch_seconds)
            if not any(a <= lo and hi <= b for a, b in intervals):
                intervals.append((lo, hi))
        else:
            stages.append(s)
    intervals.sort()
    return Hypnogram(stages=stages, epoch_seconds=h.epoch_seconds,
                     artifact_intervals=intervals)


# --- filtering and normalization --------------------------------------------

def design_bandpass(fs: float, spec: FilterSpec) -> np.ndarray:
    """Second-order-section Butterworth band-pass design with a stability
    check on the discretized poles."""
    if not 0 < spec.low_cut < spec.high_cut < fs / 2:
        raise BadSpec(f"cutoffs ({spec.low_cut}, {spec.high_cut}) invalid "
                      f"for fs={fs}")
    if spec.order < 1:
        raise BadSpec(f"order {spec.order} must be >= 1")
    sos = scipy.signal.butter(spec.order, [spec.low_cut, spec.high_cut],
                              btype="bandpass", fs=fs, output="sos")
    for section in sos:
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise UnstableDesign(
                f"pole magnitude {np.abs(poles).max():.6f} >= 1")
    return sos


def butterworth_bandpass(signal: np.ndarray, fs: float,
                         spec: FilterSpec) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    sos = design_bandpass(fs, spec)
    if spec.zero_phase:
        padlen = 3 * (2 * len(sos) + 1)
        if len(signal) <= 3 * padlen:
            raise BadSpec(f"signal of {len(signal)} samples is too short "
                          f"for zero-phase filtering (needs > {3 * padlen})")
        return scipy.signal.sosfiltfilt(sos, signal)
    return scipy.signal.sosfilt(sos, signal)


def zscore(signal: np.ndarray) -> np.ndarray:
    """Standardize to zero mean, unit population standard deviation."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size < 2:
        raise DegenerateSignal("need at least 2 samples to standardize")
    std = signal.std()
    if std <= 1e-12:
        raise DegenerateSignal(f"population std {std} below 1e-12")
    return (signal - signal.mean()) / std


# --- artifact excision ------------------------------------------------------

def excise_artifacts(rec: Recording,
                     h: Hypnogram) -> tuple[Recording, Hypnogram]:
    """Remove artifact spans from the recording and hypnogram.

    Intervals are expanded to whole epochs so the surviving samples stay
    aligned to the surviving epoch grid; every epoch overlapping an
    artifact interval is dropped in full.
    """
    duration = rec.duration_seconds()
    for lo, hi in h.artifact_intervals:
        if hi > duration + 1e-9:
            raise IntervalOutOfRange(f"interval ({lo}, {hi}) exceeds the "
                                     f"{duration:.1f}s recording")
    if not h.artifact_intervals:
        return rec, h
    eps = h.epoch_seconds
    n_epochs = len(h.stages)
    drop = np.zeros(n_epochs, dtype=bool)
    for lo, hi in h.artifact_intervals:
        first = int(np.floor(lo / eps))
        last = int(np.ceil(hi / eps))
        drop[first:min(last, n_epochs)] = True
    keep = ~drop
    if not keep.any():
        raise EmptyInput("every epoch is covered by artifact intervals")

    channels = []
    for c in rec.channels:
        spe = c.sampling_rate * eps
        if abs(spe - round(spe)) > 1e-9:
            raise BadSpec(f"epoch length {eps}s is not a whole number of "
                          f"samples at {c.sampling_rate} Hz")
        spe = int(round(spe))
        usable = c.samples[:n_epochs * spe].reshape(n_epochs, spe)
        kept = usable[keep].reshape(-1)
        tail = c.samples[n_epochs * spe:]
        channels.append(ChannelSeries(
            label=c.label, sampling_rate=c.sampling_rate,
            physical_unit=c.physical_unit,
            samples=np.concatenate([kept, tail]) if tail.size else kept,
            calibration=c.calibration))
    new_h = Hypnogram(stages=[s for s, k in zip(h.stages, keep) if k],
                      epoch_seconds=eps, artifact_intervals=[])
    return Recording(rec.patient_id, channels, rec.start_time), new_h


# --- stage segmentation -----------------------------------------------------

def order_channels(rec: Recording,
                   wanted: tuple = DEFAULT_CHANNEL_ORDER) -> Recording:
    """Select and order analysis channels by label suffix match."""
    chosen = []
    for suffix in wanted:
        match = [c for c in rec.channels if c.label.endswith(suffix)]
        if not match:
            raise ChannelMissing(
                f"no channel labelled *{suffix} among "
                f"{[c.label for c in rec.channels]}")
        chosen.append(match[0])
    return Recording(rec.patient_id, chosen, rec.start_time)


_BUCKET_OF = {StageCode.N1: "N1", StageCode.N2: "N2", StageCode.N3: "N3",
              StageCode.REM: "REM"}


def split_by_stage(rec: Recording, h: Hypnogram,
                   include_all: bool = True) -> dict[str, list[np.ndarray]]:
    """Assign epochs to stage buckets, merging adjacent same-stage epochs
    into contiguous [d x L] spans.  W and UNKNOWN are discarded from the
    stage buckets; the ALL bucket keeps every known-stage epoch (W included)
    for whole-night runs."""
    rates = {c.sampling_rate for c in rec.channels}
    if len(rates) != 1:
        raise BadSpec(f"channels disagree on sampling rate: {rates}")
    fs = rates.pop()
    if rec.duration_seconds() + 1e-9 < h.duration_seconds():
        raise EmptyInput(
            f"recording covers {rec.duration_seconds():.1f}s but the "
            f"hypnogram spans {h.duration_seconds():.1f}s")
    spe = int(round(fs * h.epoch_seconds))
    stacked = np.stack([c.samples for c in rec.channels])   # [d, total]

    buckets: dict[str, list[np.ndarray]] = {b: [] for b in STAGE_BUCKETS}
    run_bucket = None
    run_start = 0
    for idx in range(len(h.stages) + 1):
        bucket = None
        if idx < len(h.stages):
            bucket = _BUCKET_OF.get(h.stages[idx])
        if bucket != run_bucket:
            if run_bucket is not None:
                lo = run_start * spe
                hi = idx * spe
                buckets[run_bucket].append(stacked[:, lo:hi].copy())
            run_bucket = bucket
            run_start = idx
    if include_all:
        known = [s is not StageCode.UNKNOWN and s is not StageCode.MT
                 for s in h.stages]
        all_spans = []
        start = None
        for idx in range(len(known) + 1):
            good = idx < len(known) and known[idx]
            if good and start is None:
                start = idx
            elif not good and start is not None:
                all_spans.append(
                    stacked[:, start * spe:idx * spe].copy())
                start = None
        buckets[ALL_BUCKET] = all_spans
    return buckets


# --- resampling -------------------------------------------------------------

_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


def resample(signal: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Band-limited rational resampling (Kaiser-windowed polyphase sinc).

    Output length is round(len * fs_out / fs_in); equal rates copy through.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise EmptyInput("cannot resample an empty signal")
    if fs_in <= 0 or fs_out <= 0:
        raise BadSpec("sampling rates must be positive")
    ratio = Fraction(round(fs_out * 1e6), round(fs_in * 1e6))
    p, q = ratio.numerator, ratio.denominator
    if p == q:
        return signal.copy()
    n_out = int(round(len(signal) * p / q))
    max_rate = max(p, q)
    half_len = (_TAPS_PER_PHASE * max_rate) // 2
    taps = scipy.signal.firwin(2 * half_len + 1, 1.0 / max_rate,
                               window=("kaiser", _KAISER_BETA)) * p
    # zero-pad so the filter delay is a whole number of output samples
    n_pre_pad = (q - half_len % q) % q
    n_pre_remove = (half_len + n_pre_pad) // q
    taps = np.concatenate([np.zeros(n_pre_pad), taps])

    def out_len(n_taps):
        return ((len(signal) - 1) * p + n_taps + q - 1) // q
    n_post_pad = 0
    while out_len(len(taps) + n_post_pad) < n_out + n_pre_remove:
        n_post_pad += q
    if n_post_pad:
        taps = np.concatenate([taps, np.zeros(n_post_pad)])
    full = scipy.signal.upfirdn(taps, signal, up=p, down=q)
    return full[n_pre_remove:n_pre_remove + n_out]


def resample_span(span: np.ndarray, fs_in: float,
                  fs_out: float) -> np.ndarray:
    return np.stack([resample(row, fs_in, fs_out) for row in span])


# --- fixed-length segmentation ----------------------------------------------

def segment_fixed(span: np.ndarray, seconds: float = 10.0,
                  fs: float = 128.0) -> list[np.ndarray]:
    """Cut a [d x L] span into non-overlapping [d x seconds*fs] windows,
    discarding the trailing remainder.  Spans shorter than one window yield
    an empty list (the caller counts these)."""
    step = int(round(seconds * fs))
    d, length = span.shape
    count = length // step
    return [span[:, i * step:(i + 1) * step].copy() for i in range(count)]


# --- full pipeline ----------------------------------------------------------

def preprocess_recording(rec: Recording, h: Hypnogram, *,
                         label: int | None = None,
                         config: PreprocessConfig | None = None,
                         ) -> tuple[dict[str, SegmentBatch | None],
                                    PreprocessStats]:
    """Run the full chain on one (recording, hypnogram) pair.

    Returns one SegmentBatch per non-empty bucket (None where a bucket has
    no segments) and bookkeeping stats.
    """
    cfg = config or PreprocessConfig()
    stats = PreprocessStats(epochs_total=len(h.stages))
    h = standardize_stages(h)
    rec = order_channels(rec, cfg.channel_order)
    rec, h = excise_artifacts(rec, h)
    stats.epochs_artifact = stats.epochs_total - len(h.stages)
    stats.epochs_wake = sum(1 for s in h.stages if s is StageCode.W)

    fs = rec.channels[0].sampling_rate
    channels = []
    for c in rec.channels:
        filtered = butterworth_bandpass(c.samples, fs, cfg.filter)
        channels.append(ChannelSeries(
            label=c.label, sampling_rate=fs, physical_unit=c.physical_unit,
            samples=zscore(filtered)))
    rec = Recording(rec.patient_id, channels, rec.start_time)

    buckets = split_by_stage(rec, h, include_all=True)
    out: dict[str, SegmentBatch | None] = {}
    for bucket, spans in buckets.items():
        segments = []
        for span in spans:
            resampled = resample_span(span, fs, cfg.target_rate)
            cut = segment_fixed(resampled, cfg.segment_seconds,
                                cfg.target_rate)
            if not cut and span.shape[1] > 0:
                stats.short_spans += 1
            segments.extend(cut)
        if segments:
            values = np.stack(segments)
            out[bucket] = SegmentBatch(
                values=values,
                patient_ids=[rec.patient_id] * len(segments),
                stage=bucket,
                labels=None if label is None
                else np.full(len(segments), label, dtype=np.int64),
                sampling_rate=cfg.target_rate)
        else:
            out[bucket] = None
        stats.segments_per_stage[bucket] = len(segments)
    return out, stats


# --- segment store ----------------------------------------------------------

_STORE_MAGIC = b"SOMNSEG1"
_STORE_VERSION = 1


def save_store(path, batch: SegmentBatch) -> None:
    path = Path(path)
    n, d, t = batch.values.shape
    meta = {
        "stage": batch.stage,
        "sampling_rate": batch.sampling_rate,
        "patients": list(batch.patient_ids),
        "labels": None if batch.labels is None else
                  [int(v) for v in batch.labels],
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_STORE_MAGIC)
        f.write(struct.pack("<IIII", _STORE_VERSION, n, d, t))
        f.write(batch.values.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_store(path) -> SegmentBatch:
    path = Path(path)
    if not path.exists():
        raise MissingStore(str(path))
    with open(path, "rb") as f:
        if f.read(8) != _STORE_MAGIC:
            raise MissingStore(f"{path} is not a segment store")
        version, n, d, t = struct.unpack("<IIII", f.read(16))
        if version != _STORE_VERSION:
            raise MissingStore(f"unsupported store version {version}")
        values = np.frombuffer(f.read(4 * n * d * t), dtype="<f4")
        values = values.reshape(n, d, t).astype(np.float64)
        meta_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
    labels = meta["labels"]
    return SegmentBatch(
        values=values,
        patient_ids=meta["patients"],
        stage=meta["stage"],
        labels=None if labels is None else np.asarray(labels),
        sampling_rate=meta["sampling_rate"])


def patient_ranges(batch: SegmentBatch) -> dict[str, list[list[int]]]:
    """Contiguous [start, end) segment ranges per patient, for the index."""
    ranges: dict[str, list[list[int]]] = {}
    prev = None
    for i, pid in enumerate(batch.patient_ids):
        if pid == prev:
            ranges[pid][-1][1] = i + 1
        else:
            ranges.setdefault(pid, []).append([i, i + 1])
        prev = pid
    return ranges


def write_store_dir(directory, batches: dict[str, SegmentBatch]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for stage, batch in batches.items():
        if batch is None or batch.n == 0:
            continue
        save_store(directory / f"{stage}.seg", batch)
        index[stage] = patient_ranges(batch)
    with open(directory / "index.json", "w", encoding="utf-8") as f:
        json.dump(index, f, indent=1, sort_keys=True)


def load_store_dir(directory, stage: str) -> SegmentBatch:
    path = Path(directory) / f"{stage}.seg"
    if not path.exists():
        raise MissingStore(f"no segment store for stage {stage} "
                           f"in {directory}")
    return load_store(path)
