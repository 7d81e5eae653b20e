"""Deterministic synthetic overnight-EEG corpus generator.

Each patient gets a night of 4-channel colored noise: a stage sequence from
a cyclic stage-transition chain with random dwell times, per-stage band-power
profiles over the classic EEG bands, and class-dependent differences — the
"AD" class shifts spectral weight from the fast bands (alpha/beta) into the
slow ones (delta/theta) and can additionally receive cross-channel coupling
through a shared source.  Output is ordinary EDF + hypnogram text plus a
JSON manifest, byte-identical for identical seeds.

Two knobs shape how the class difference is expressed:

* ``severity_jitter`` places every patient on a continuous severity axis
  between the two class profiles instead of at the exact endpoints, so
  patients within a class differ from each other the way real cohorts do.
* ``channel_weights`` expresses the slowing shift unevenly across the four
  channels (strongly frontal, weakly occipital).  The cross-channel
  *contrast* this creates is independent of the sleep stage, while
  channel-averaged summary statistics only see the (smaller) mean shift.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .edfio import (ChannelSeries, Hypnogram, Recording, StageCode,
                    write_edf, write_hypnogram)
from .errors import SpecInvalid
from .preprocess import DEFAULT_CHANNEL_ORDER

BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 32.0),
}
BAND_ORDER = ("delta", "theta", "alpha", "beta")
CLASS_NAMES = ("HC", "AD")
LABELS = {"HC": 0, "AD": 1}
AGE_GROUPS = ("60-69", "70-79", "80+")
EPOCH_SECONDS = 30
_WARMUP = 512          # samples discarded to clear filter transients

_HC_PROFILE = {
    "W": (0.15, 0.15, 0.40, 0.30),
    "N1": (0.25, 0.40, 0.25, 0.10),
    "N2": (0.45, 0.30, 0.15, 0.10),
    "N3": (0.70, 0.20, 0.05, 0.05),
    "REM": (0.20, 0.35, 0.25, 0.20),
}


def default_profiles(gap: float = 0.45) -> dict:
    """Class profiles; `gap` moves that fraction of alpha+beta weight into
    delta/theta (60/40) for the AD class."""
    if not 0.0 <= gap < 1.0:
        raise SpecInvalid("gap must lie in [0, 1)")
    ad = {}
    for stage, (d, t, a, b) in _HC_PROFILE.items():
        shift = gap * (a + b)
        ad[stage] = (d + 0.6 * shift, t + 0.4 * shift,
                     a * (1 - gap), b * (1 - gap))
    return {"HC": dict(_HC_PROFILE), "AD": ad}


@dataclass(frozen=True)
class SynthSpec:
    patients_per_class: int = 20
    profiles: dict = field(default_factory=default_profiles)
    spatial_coupling: float = 0.0        # applied to the AD class only
    noise_std: float = 30.0
    artifact_rate: float = 0.05          # per-epoch burst probability
    seed: int = 0
    fs_out: tuple = (200, 256)           # cycled over patients
    severity_jitter: float = 0.35        # per-patient spread on the severity axis
    channel_weights: tuple = (1.7, 1.1, 0.3, 0.1)  # per-channel shift expression

    def __post_init__(self):
        if self.patients_per_class < 5:
            raise SpecInvalid("patients_per_class must be >= 5")
        if not 0.0 <= self.spatial_coupling <= 1.0:
            raise SpecInvalid("spatial_coupling must lie in [0, 1]")
        if self.noise_std <= 0:
            raise SpecInvalid("noise_std must be positive")
        if not 0.0 <= self.artifact_rate < 1.0:
            raise SpecInvalid("artifact_rate must lie in [0, 1)")
        if not self.fs_out or any(fs not in (200, 256) for fs in self.fs_out):
            raise SpecInvalid("fs_out entries must be 200 or 256")
        if not 0.0 <= self.severity_jitter < 1.0:
            raise SpecInvalid("severity_jitter must lie in [0, 1)")
        cw = np.asarray(self.channel_weights, dtype=np.float64)
        if cw.shape != (len(DEFAULT_CHANNEL_ORDER),) or np.any(cw < 0) \
                or not np.any(cw > 0):
            raise SpecInvalid(
                f"channel_weights must be {len(DEFAULT_CHANNEL_ORDER)} "
                "nonnegative values, at least one positive")
        for cls in CLASS_NAMES:
            if cls not in self.profiles:
                raise SpecInvalid(f"profiles missing class {cls}")
            for stage, weights in self.profiles[cls].items():
                w = np.asarray(weights, dtype=np.float64)
                if w.shape != (4,) or np.any(w < 0) \
                        or abs(w.sum() - 1.0) > 1e-9:
                    raise SpecInvalid(
                        f"profile {cls}/{stage} must be 4 nonnegative "
                        "weights summing to 1")


@dataclass
class PatientEntry:
    patient_id: str
    class_name: str
    label: int
    age_group: str
    edf_path: str          # relative to the corpus root
    hypnogram_path: str
    severity: float | None = None   # position on the HC→AD severity axis


@dataclass
class Corpus:
    root: Path
    entries: list
    seed: int


def _night_stages(rng: np.random.Generator) -> list:
    """Cyclic stage chain with random dwell; every stage appears each
    night, and the total sits near 40 epochs (a twentieth-scale night)."""
    stages: list[StageCode] = []

    def dwell(stage, lo, hi):
        stages.extend([stage] * int(rng.integers(lo, hi + 1)))

    dwell(StageCode.W, 2, 3)
    for cycle in range(3):
        if cycle and rng.random() < 0.5:      # brief awakening
            dwell(StageCode.W, 1, 1)
        dwell(StageCode.N1, 1, 2)
        dwell(StageCode.N2, 3, 5)
        dwell(StageCode.N3, 2, 4)
        dwell(StageCode.N2, 1, 2)
        dwell(StageCode.REM, 2, 3)
    dwell(StageCode.W, 1, 2)
    return stages


def _band_filters(fs: float) -> dict:
    return {name: butter(4, lohi, btype="bandpass", fs=fs, output="sos")
            for name, lohi in BANDS.items()}


def _colored_run(rng, filters, weights, n: int, channels: int) -> np.ndarray:
    """[channels, n] unit-variance noise mixing the four bands by weight.

    `weights` is either one 4-vector shared by all channels or a
    (channels, 4) matrix giving each channel its own band mix.
    """
    w2 = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if w2.shape[0] == 1:
        w2 = np.broadcast_to(w2, (channels, w2.shape[1]))
    out = np.zeros((channels, n))
    for bi, band in enumerate(BAND_ORDER):
        col = w2[:, bi]
        if not col.any():
            continue
        white = rng.normal(size=(channels, n + _WARMUP))
        shaped = sosfilt(filters[band], white, axis=1)[:, _WARMUP:]
        shaped /= shaped.std(axis=1, keepdims=True)
        out += np.sqrt(col)[:, None] * shaped
    return out


def patient_profile(spec: SynthSpec, severity: float) -> dict:
    """Per-stage (channels, 4) band weights for one patient.

    Each channel's weights are blended from the reference-class profile
    toward the affected-class profile by `severity * channel_weight`, then
    floored and renormalized so every row stays a valid simplex point.
    """
    base = spec.profiles[CLASS_NAMES[0]]
    target = spec.profiles[CLASS_NAMES[1]]
    cw = np.asarray(spec.channel_weights, dtype=np.float64)[:, None]
    out = {}
    for stage, bw in base.items():
        b = np.asarray(bw, dtype=np.float64)
        t = np.asarray(target[stage], dtype=np.float64)
        rows = b[None, :] + severity * cw * (t - b)[None, :]
        rows = np.clip(rows, 0.01, None)
        out[stage] = rows / rows.sum(axis=1, keepdims=True)
    return out


def _synthesize_night(rng, stages, profile, fs, spec,
                      coupled: bool) -> np.ndarray:
    """[4, n_samples] signal following the stage sequence's spectra."""
    filters = _band_filters(fs)
    d = len(DEFAULT_CHANNEL_ORDER)
    per_epoch = EPOCH_SECONDS * fs
    pieces = []
    i = 0
    while i < len(stages):
        j = i
        while j < len(stages) and stages[j] == stages[i]:
            j += 1
        n = (j - i) * per_epoch
        weights = np.atleast_2d(profile[stages[i].value])
        run = _colored_run(rng, filters, weights, n, d)
        if coupled and spec.spatial_coupling > 0:
            shared = _colored_run(rng, filters, weights.mean(axis=0), n, 1)
            rho = spec.spatial_coupling
            run = np.sqrt(1 - rho) * run + np.sqrt(rho) * shared
        pieces.append(run)
        i = j
    return np.concatenate(pieces, axis=1) * spec.noise_std


def _inject_artifacts(rng, signal: np.ndarray, n_epochs: int, fs: int,
                      rate: float) -> list:
    """x10 amplitude bursts of 1-3 s; returns the affected epoch indices."""
    per_epoch = EPOCH_SECONDS * fs
    hit = []
    for e in range(n_epochs):
        if rng.random() >= rate:
            continue
        duration = float(rng.uniform(1.0, 3.0))
        start = float(rng.uniform(0.0, EPOCH_SECONDS - duration))
        a = e * per_epoch + int(round(start * fs))
        b = a + int(round(duration * fs))
        signal[:, a:b] *= 10.0
        hit.append(e)
    return hit


def generate(spec: SynthSpec, out_dir) -> Corpus:
    """Write one EDF + hypnogram per patient plus manifest.json."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for cls_idx, cls in enumerate(CLASS_NAMES):
        for i in range(spec.patients_per_class):
            pidx = cls_idx * spec.patients_per_class + i
            rng = np.random.default_rng([spec.seed, pidx])
            pid = f"{cls}{i:03d}"
            age = str(rng.choice(AGE_GROUPS))
            j = spec.severity_jitter
            severity = float(rng.uniform(0.0, j) if cls_idx == 0
                             else rng.uniform(1.0 - j, 1.0 + j))
            fs = spec.fs_out[pidx % len(spec.fs_out)]
            stages = _night_stages(rng)
            signal = _synthesize_night(rng, stages,
                                       patient_profile(spec, severity), fs,
                                       spec, coupled=(cls == "AD"))
            bad = _inject_artifacts(rng, signal, len(stages), fs,
                                    spec.artifact_rate)
            hyp_stages = list(stages)
            intervals = []
            for e in bad:
                hyp_stages[e] = StageCode.MT
                intervals.append((float(e * EPOCH_SECONDS),
                                  float((e + 1) * EPOCH_SECONDS)))
            rec = Recording(
                patient_id=pid,
                channels=[ChannelSeries(label=lab, sampling_rate=float(fs),
                                        physical_unit="uV", samples=ch)
                          for lab, ch in zip(DEFAULT_CHANNEL_ORDER, signal)],
                start_time="2024-01-01T23:00:00")
            edf_name, hyp_name = f"{pid}.edf", f"{pid}.hyp"
            (root / edf_name).write_bytes(write_edf(rec))
            (root / hyp_name).write_text(
                write_hypnogram(Hypnogram(stages=hyp_stages,
                                          epoch_seconds=EPOCH_SECONDS,
                                          artifact_intervals=intervals)),
                encoding="ascii")
            entries.append(PatientEntry(
                patient_id=pid, class_name=cls, label=LABELS[cls],
                age_group=age, edf_path=edf_name, hypnogram_path=hyp_name,
                severity=round(severity, 6)))
    corpus = Corpus(root=root, entries=entries, seed=spec.seed)
    (root / "manifest.json").write_text(manifest(corpus), encoding="utf-8")
    return corpus


def manifest(corpus: Corpus) -> str:
    """JSON manifest: patient_id -> class/age/file paths."""
    doc = {
        "seed": corpus.seed,
        "patients": {
            e.patient_id: {
                "class": e.class_name,
                "label": e.label,
                "age_group": e.age_group,
                "severity": e.severity,
                "edf": e.edf_path,
                "hypnogram": e.hypnogram_path,
            } for e in corpus.entries
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def load_corpus(root) -> Corpus:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    entries = [
        PatientEntry(patient_id=pid, class_name=info["class"],
                     label=info["label"], age_group=info["age_group"],
                     edf_path=info["edf"], hypnogram_path=info["hypnogram"],
                     severity=info.get("severity"))
        for pid, info in sorted(doc["patients"].items())
    ]
    return Corpus(root=root, entries=entries, seed=doc["seed"])


def spec_with_gap(base: SynthSpec, gap: float) -> SynthSpec:
    """Same spec, band-weight gap replaced (separability control)."""
    return dataclasses.replace(base, profiles=default_profiles(gap))
