"""Hand-crafted per-segment features: moments and Hjorth parameters.

The default 4-dimensional emission vector is [mean, std, excess kurtosis,
Hjorth complexity], computed per channel and averaged across channels.
(Hjorth activity duplicates the variance, and mobility is available through
the `emission` argument for configurations that prefer it.)
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSignal
from .preprocess import SegmentBatch

_VAR_FLOOR = 1e-12

DEFAULT_EMISSION = ("mean", "std", "kurtosis", "complexity")
AVAILABLE_FEATURES = ("mean", "std", "kurtosis", "mobility", "complexity")


@dataclass
class FeatureVector:
    mean: float
    std: float
    kurtosis: float          # excess (Fisher) convention
    mobility: float
    complexity: float


def moments(x: np.ndarray) -> tuple[float, float, float]:
    """Population mean, standard deviation, and excess kurtosis."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 4:
        raise DegenerateSignal(f"need at least 4 samples, got {x.size}")
    mean = x.mean()
    d = x - mean
    m2 = np.mean(d * d)
    if m2 <= _VAR_FLOOR:
        raise DegenerateSignal(f"variance {m2} at or below the floor")
    m4 = np.mean(d ** 4)
    return float(mean), float(np.sqrt(m2)), float(m4 / (m2 * m2) - 3.0)


def hjorth(x: np.ndarray) -> tuple[float, float]:
    """Hjorth mobility and complexity from first differences."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        raise DegenerateSignal(f"need at least 3 samples, got {x.size}")
    v0 = x.var()
    d1 = np.diff(x)
    v1 = d1.var()
    if v0 <= _VAR_FLOOR or v1 <= _VAR_FLOOR:
        raise DegenerateSignal("variance at or below the floor")
    v2 = np.diff(d1).var()
    mobility = np.sqrt(v1 / v0)
    complexity = np.sqrt(v2 / v1) / mobility
    return float(mobility), float(complexity)


def channel_features(x: np.ndarray) -> FeatureVector:
    mean, std, kurt = moments(x)
    mob, comp = hjorth(x)
    return FeatureVector(mean, std, kurt, mob, comp)


def segment_features(batch: SegmentBatch,
                     emission: tuple = DEFAULT_EMISSION) -> np.ndarray:
    """Per-segment feature matrix [N x len(emission)], channel-averaged."""
    unknown = set(emission) - set(AVAILABLE_FEATURES)
    if unknown:
        raise ValueError(f"unknown features requested: {sorted(unknown)}")
    values = batch.values
    n, d, t = values.shape
    if n == 0:
        return np.zeros((0, len(emission)))

    mean = values.mean(axis=2)                       # [N, d]
    centered = values - mean[:, :, None]
    m2 = np.mean(centered * centered, axis=2)
    bad = np.argwhere(m2 <= _VAR_FLOOR)
    if bad.size:
        seg, ch = bad[0]
        raise DegenerateSignal(
            f"segment {seg} channel {ch} has variance {m2[seg, ch]}")
    m4 = np.mean(centered ** 4, axis=2)
    kurtosis = m4 / (m2 * m2) - 3.0

    d1 = np.diff(values, axis=2)
    v1 = d1.var(axis=2)
    bad = np.argwhere(v1 <= _VAR_FLOOR)
    if bad.size:
        seg, ch = bad[0]
        raise DegenerateSignal(
            f"segment {seg} channel {ch}: first difference is constant")
    v2 = np.diff(d1, axis=2).var(axis=2)
    mobility = np.sqrt(v1 / m2)
    complexity = np.sqrt(v2 / v1) / mobility

    columns = {
        "mean": mean, "std": np.sqrt(m2), "kurtosis": kurtosis,
        "mobility": mobility, "complexity": complexity,
    }
    rows = np.stack([columns[name].mean(axis=1) for name in emission], axis=1)
    return rows


def features_csv(matrix: np.ndarray,
                 emission: tuple = DEFAULT_EMISSION) -> str:
    buf = io.StringIO()
    buf.write("segment," + ",".join(emission) + "\n")
    for i, row in enumerate(matrix):
        buf.write(f"{i}," + ",".join(f"{v:.10g}" for v in row) + "\n")
    return buf.getvalue()
