"""Temporal Grad-CAM over the last convolutional block.

Importance weights are the time-averaged gradients of a class logit with
respect to each last-layer feature map; the map is the weighted sum of the
feature maps. The map is kept signed so segments that argue against a class
stay visible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EmptyInput, EmptyRecording, InvalidClass, MixedClasses, ShapeMismatch
from .model import PdNet, as_batch, forward

TOP_N_WORDS = 10
PERCENTILE = 90.0


@dataclass(frozen=True)
class GradCamResult:
    map: np.ndarray  # L^c(t), length T
    alpha: np.ndarray  # one weight per feature map
    class_id: int
    chunk_ref: str = ""


def importance_weights(grads: np.ndarray) -> np.ndarray:
    """Global average pooling over time of d y^c / d A_k(t); ``grads`` is (..., K, T)."""
    grads = np.asarray(grads, dtype=np.float64)
    return grads.sum(axis=-1) / grads.shape[-1]


def weighted_map(alpha: np.ndarray, activations: np.ndarray) -> np.ndarray:
    """``sum_k alpha_k A_k(t)`` for ``activations`` of shape (..., K, T)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    return np.einsum("...k,...kt->...t", alpha, activations)


def grad_cam_forward(fwd, class_ids: Sequence[int], refs: Sequence[str] | None = None) -> list[GradCamResult]:
    """Grad-CAM from an already-recorded eval-mode forward pass.

    ``fwd`` needs ``logits``, ``tape`` and ``activations`` attributes.
    Each row is seeded on its own class logit, which yields exact per-sample
    gradients as long as the forward pass treats samples independently.
    """
    logits = fwd.logits
    n, n_classes = logits.shape
    class_ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if len(class_ids) != n:
        raise ShapeMismatch(f"{len(class_ids)} class ids for {n} samples")
    if np.any((class_ids < 0) | (class_ids >= n_classes)):
        raise InvalidClass(f"class ids must lie in [0, {n_classes})")
    acts = fwd.activations
    acts.zero_grad()
    seed = np.zeros(logits.shape)
    seed[np.arange(n), class_ids] = 1.0
    fwd.tape.backward(logits, seed)
    alpha = importance_weights(acts.grad)
    maps = weighted_map(alpha, acts.values)
    refs = list(refs) if refs is not None else [""] * n
    return [GradCamResult(maps[i], alpha[i], int(class_ids[i]), refs[i]) for i in range(n)]


def grad_cam_batch(net: PdNet, samples, class_ids, refs=None, batch_size: int = 64) -> list[GradCamResult]:
    x = as_batch(samples, net.chunk_len)
    class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (len(x),))
    refs = list(refs) if refs is not None else [""] * len(x)
    out: list[GradCamResult] = []
    for i in range(0, len(x), batch_size):
        fwd = forward(net, x[i : i + batch_size], train=False)
        out.extend(grad_cam_forward(fwd, class_ids[i : i + batch_size], refs[i : i + batch_size]))
    return out


def grad_cam(net: PdNet, chunk, class_id: int) -> GradCamResult:
    samples = getattr(chunk, "samples", chunk)
    ref = getattr(chunk, "recording_ref", "")
    return grad_cam_batch(net, samples, [class_id], [ref])[0]


def class_averaged_map(results: Sequence[GradCamResult], class_id: int | None = None) -> np.ndarray:
    if not results:
        raise EmptyInput("no Grad-CAM results to average")
    ids = {r.class_id for r in results}
    if len(ids) > 1 or (class_id is not None and ids != {class_id}):
        raise MixedClasses(f"results carry classes {sorted(ids)}")
    maps = np.stack([r.map for r in results])
    return maps.mean(axis=0)


# ---------------------------------------------------------------------------
# segment scoring and selection


@dataclass(frozen=True)
class SegmentImportance:
    chunk_ref: str
    words: tuple[str, ...]
    raw_score: float
    score: float = 0.0
    selected: bool = False
    recording: str = ""
    start_s: float = 0.0
    end_s: float = 0.0
    index: int = 0
    flags: tuple[str, ...] = ()


def chunk_score(result: GradCamResult) -> float:
    return float(np.mean(result.map))


def normalize_per_recording(scores: Sequence[SegmentImportance]) -> list[SegmentImportance]:
    """Divide raw scores by the recording's largest magnitude, keeping signs."""
    if not scores:
        raise EmptyRecording("no segments")
    raw = np.array([s.raw_score for s in scores], dtype=np.float64)
    peak = np.max(np.abs(raw))
    if peak == 0 or not np.isfinite(peak):
        return [replace(s, score=0.0, flags=s.flags + ("zero_max",)) for s in scores]
    return [replace(s, score=float(r / peak)) for s, r in zip(scores, raw)]


def select_top_decile(scores: Sequence[SegmentImportance], percentile: float = PERCENTILE) -> list[SegmentImportance]:
    """Flag segments whose normalized score strictly exceeds the percentile threshold.

    The threshold interpolates linearly between order statistics.
    """
    if not scores:
        raise EmptyInput("no segments")
    vals = np.array([s.score for s in scores], dtype=np.float64)
    threshold = float(np.percentile(vals, percentile))
    extra = ("single_segment",) if len(scores) == 1 else ()
    return [replace(s, selected=bool(v > threshold), flags=s.flags + extra) for s, v in zip(scores, vals)]


def word_frequency_report(selected: Sequence[SegmentImportance], top_n: int = TOP_N_WORDS) -> list[tuple[str, int]]:
    counts = Counter(w for s in selected if s.selected for w in s.words)
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return rows[:top_n] if top_n else rows


def score_recording(results: Sequence[GradCamResult], chunks, percentile: float = PERCENTILE) -> list[SegmentImportance]:
    """Normalize and select within one recording's chunks (given in time order)."""
    raw = [
        SegmentImportance(
            chunk_ref=f"{c.recording_ref}#{i}",
            words=tuple(c.words),
            raw_score=chunk_score(r),
            recording=c.recording_ref,
            start_s=c.start_s,
            end_s=c.end_s,
            index=i,
        )
        for i, (r, c) in enumerate(zip(results, chunks))
    ]
    return select_top_decile(normalize_per_recording(raw), percentile)
