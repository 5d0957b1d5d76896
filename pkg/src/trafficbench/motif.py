"""Threshold-crossing traffic motif extraction and statistical features.

A motif is the contiguous above-threshold run around a local maximum,
truncated to the sliding window (half-width n, so at most 2n+1 samples).
Features are the burst statistics used by the classical inference attacks,
plus a PCA projection helper.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from trafficbench import kernels
from trafficbench.ingest import ContractError, RateTrace

FEATURE_NAMES = (
    "duration",
    "mean",
    "max",
    "min",
    "std",
    "variance",
    "range",
    "skewness",
    "coeff_of_variation",
    "kurtosis",
    "area",
    "auc",
)


@dataclass(frozen=True)
class Motif:
    """A burst window around a local maximum exceeding the threshold."""

    device_id: str
    direction: str
    center_index: int
    window_half_n: int
    threshold: float
    samples: np.ndarray
    start_index: int
    granularity_s: int

    def __post_init__(self):
        samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> int:
        return len(self.samples) * self.granularity_s

    @property
    def center_offset(self) -> int:
        return self.center_index - self.start_index


def extract_motifs(trace: RateTrace, threshold: float, window_half_n: int) -> list[Motif]:
    """One motif per local maximum above the threshold, ordered by position.

    The motif's samples are the contiguous above-threshold run around the
    maximum, truncated at +/- window_half_n samples; plateau ties take the
    leftmost sample as the center.
    """
    if threshold < 0:
        raise ContractError("threshold must be >= 0")
    if window_half_n < 1:
        raise ContractError("window_half_n must be >= 1")
    if trace.n_missing:
        raise ContractError("impute the trace before motif extraction")
    centers, starts, stops = kernels.motif_scan(
        np.ascontiguousarray(trace.rates), float(threshold), int(window_half_n)
    )
    return [
        Motif(
            device_id=trace.device_id,
            direction=trace.direction,
            center_index=int(c),
            window_half_n=window_half_n,
            threshold=threshold,
            samples=trace.rates[a:b],
            start_index=int(a),
            granularity_s=trace.granularity_s,
        )
        for c, a, b in zip(centers, starts, stops)
    ]


def compute_features(motif: Motif, corrected_skew_norm: bool = False) -> np.ndarray:
    """The burst statistics, in FEATURE_NAMES order.

    Area is the left-Riemann sum of (x - T) over the motif; skewness keeps
    the window-based 1/(2n) normalization unless ``corrected_skew_norm``
    selects 1/(2n+1).  Degenerate conventions: CV = 0 when the mean is 0,
    skewness and kurtosis = 0 when the deviation is 0.
    """
    x = motif.samples
    if x.size == 0:
        raise ContractError("motif must have at least one sample")
    dt = float(motif.granularity_s)
    mu = float(x.mean())
    sigma = float(x.std())
    norm = (2 * motif.window_half_n + 1) if corrected_skew_norm else (2 * motif.window_half_n)
    if sigma > 0.0:
        z = (x - mu) / sigma
        skew = float(np.sum(z**3)) / norm
        kurt = float(np.sum(z**4)) / norm
    else:
        skew = 0.0
        kurt = 0.0
    return np.array(
        [
            motif.duration_s,
            mu,
            float(x.max()),
            float(x.min()),
            sigma,
            sigma**2,
            float(x.max() - x.min()),
            skew,
            sigma / mu if mu > 0 else 0.0,
            kurt,
            float(np.sum(x - motif.threshold)) * dt,
            float(np.sum(x)) * dt,
        ]
    )


def feature_matrix(motifs: list[Motif], corrected_skew_norm: bool = False) -> np.ndarray:
    if not motifs:
        return np.empty((0, len(FEATURE_NAMES)))
    return np.vstack([compute_features(m, corrected_skew_norm) for m in motifs])


def features_to_csv(features: np.ndarray) -> str:
    """Serialize a feature matrix with the fixed column order."""
    out = io.StringIO()
    out.write(",".join(FEATURE_NAMES) + "\n")
    for row in np.atleast_2d(features):
        out.write(",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def features_from_csv(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if not lines or lines[0].split(",") != list(FEATURE_NAMES):
        raise ContractError("bad feature CSV header")
    if len(lines) == 1:
        return np.empty((0, len(FEATURE_NAMES)))
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


@dataclass(frozen=True)
class PcaModel:
    """Mean vector plus orthonormal principal directions."""

    mean: np.ndarray
    components: np.ndarray  # out_dim x in_dim, orthonormal rows
    explained_variance_ratio: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(features: np.ndarray, out_dim: int) -> PcaModel:
    """Top-``out_dim`` principal directions of the mean-centered matrix.

    Sign convention: the largest-magnitude entry of each component is
    positive, so fits are deterministic.
    """
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if out_dim < 1 or out_dim > d:
        raise ContractError("out_dim must satisfy 1 <= out_dim <= feature dim")
    if n <= out_dim:
        raise ContractError("need more rows than out_dim")
    mean = features.mean(axis=0)
    centered = features - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2 / max(1, n - 1)
    total = var.sum()
    ratios = var / total if total > 0 else np.zeros_like(var)
    comps = vt[:out_dim].copy()
    for i, row in enumerate(comps):
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            comps[i] = -row
    return PcaModel(mean, comps, ratios[:out_dim])


def pca_transform(model: PcaModel, features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.mean.shape[0]:
        raise ContractError(
            f"feature dim {features.shape[1]} does not match model dim {model.mean.shape[0]}"
        )
    return (features - model.mean) @ model.components.T
