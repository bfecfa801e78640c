"""Brute-force KNN over a handful of handcrafted acoustic features.

This is a comparison anchor for the evaluation harness, not an attempt to
reproduce any published baseline.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyChunk, EmptyTrainingSet, EvenK
from .segmentation import SpeechChunk

# normalized autocorrelation below this marks a chunk unvoiced
VOICING_THRESHOLD = 0.3


@dataclass(frozen=True)
class FeatureVector:
    rms_energy: float
    zero_crossing_rate: float
    autocorr_pitch: float
    energy_std: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


def _pitch_period(x: np.ndarray, min_lag: int, max_lag: int) -> float:
    x = x - x.mean()
    r0 = float(x @ x)
    max_lag = min(max_lag, len(x) - 1)
    if r0 <= 0 or max_lag < min_lag:
        return 0.0
    n = len(x)
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, nfft)
    ac = np.fft.irfft(spec * np.conj(spec), nfft)[: max_lag + 1] / r0
    lag = min_lag + int(np.argmax(ac[min_lag : max_lag + 1]))
    return float(lag) if ac[lag] >= VOICING_THRESHOLD else 0.0


def extract_features(
    chunk: SpeechChunk | np.ndarray,
    n_subwindows: int = 8,
    min_lag: int = 16,
    max_lag: int = 400,
) -> FeatureVector:
    x = np.asarray(chunk.samples if isinstance(chunk, SpeechChunk) else chunk, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise EmptyChunk("cannot extract features from an empty chunk")
    rms = float(np.sqrt(np.mean(x * x)))
    # crossings are counted circularly, including the wrap-around pair
    signs = np.signbit(x)
    nonzero = x != 0
    pair_ok = nonzero & np.roll(nonzero, -1)
    crossings = int(np.count_nonzero((signs != np.roll(signs, -1)) & pair_ok)) if n > 1 else 0
    zcr = crossings / n
    parts = np.array_split(x, min(n_subwindows, n))
    energy_std = float(np.std([np.sqrt(np.mean(p * p)) for p in parts]))
    return FeatureVector(rms, zcr, _pitch_period(x, min_lag, max_lag), energy_std)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


def _vote(labels) -> object:
    """Majority label; among tied labels the one met first (nearest) wins."""
    counts: dict = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    return next(lab for lab in labels if counts[lab] == top)


def knn_predict(train_x, train_y, query_x, k: int = 5) -> list:
    """Brute-force KNN over already-standardized features.

    Distance ties are resolved by training-set order (stable sort).
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    query_x = np.atleast_2d(np.asarray(query_x, dtype=np.float64))
    train_y = list(train_y)
    if len(train_x) == 0:
        raise EmptyTrainingSet("KNN needs at least one training point")
    if k % 2 == 0:
        raise EvenK(f"k must be odd, got {k}")
    if k > len(train_x):
        raise ValueError(f"k={k} exceeds {len(train_x)} training points")
    d2 = ((query_x[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return [_vote([train_y[i] for i in row]) for row in nearest]


def knn_classify(train: Sequence[tuple[FeatureVector, object]], query: FeatureVector, k: int = 5):
    """Classify one query; features are z-scored with training statistics."""
    if not train:
        raise EmptyTrainingSet("KNN needs at least one training point")
    x = np.stack([f.as_array() for f, _ in train])
    scaler = Standardizer.fit(x)
    return knn_predict(scaler.transform(x), [lab for _, lab in train], scaler.transform(query.as_array()), k)[0]
