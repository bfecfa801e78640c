"""Training loop, subject-level holdout splits, metrics and significance."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .autodiff import softmax_xent
from .errors import (
    DivergenceDetected,
    EmptyTestSet,
    EmptyTrainingSet,
    LengthMismatch,
    TooFewSubjects,
)
from .model import PdNet, forward, predict_logits
from .segmentation import SpeechChunk
from .signal_io import DatasetManifest, Label

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    iteration: int
    train_subjects: frozenset[str]
    test_subjects: frozenset[str]
    seed: int

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "seed": self.seed,
            "train_subjects": sorted(self.train_subjects),
            "test_subjects": sorted(self.test_subjects),
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_splits(
    subjects: Mapping[str, Label] | DatasetManifest,
    iterations: int = 9,
    test_frac: float = 0.2,
    seed: int = 0,
) -> list[SplitPlan]:
    """Independent subject-level stratified holdouts.

    Each class contributes ``round(n * test_frac)`` test subjects, at least
    one and never all of them.
    """
    if isinstance(subjects, DatasetManifest):
        subjects = subjects.subjects()
    by_class: dict[Label, list[str]] = {lab: [] for lab in Label}
    for sid, lab in subjects.items():
        by_class[Label(lab)].append(sid)
    for lab, ids in by_class.items():
        if len(ids) < 2:
            raise TooFewSubjects(f"class {lab.value} has {len(ids)} subject(s); need at least 2")
        ids.sort()

    plans = []
    for it in range(1, iterations + 1):
        rng = np.random.default_rng([seed, it])
        test: set[str] = set()
        for lab in Label:
            ids = by_class[lab]
            n_test = min(len(ids) - 1, max(1, _round_half_up(len(ids) * test_frac)))
            order = rng.permutation(len(ids))
            test.update(ids[i] for i in order[:n_test])
        train = frozenset(subjects) - test
        plans.append(SplitPlan(it, train, frozenset(test), int(rng.integers(2**31))))
    return plans


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class Hyper:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 16
    early_stop_patience: int = 5
    val_frac: float = 0.1
    seed: int = 0


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    net: PdNet
    losses: list[float]
    val_losses: list[float]
    best_epoch: int
    stopped_early: bool


def chunk_arrays(chunks: Sequence[SpeechChunk]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.asarray(c.samples, dtype=np.float64) for c in chunks])
    y = np.array([c.label.index for c in chunks], dtype=np.int64)
    return x, y


def select_subjects(chunks: Iterable[SpeechChunk], subjects) -> list[SpeechChunk]:
    subjects = set(subjects)
    return [c for c in chunks if c.subject_id in subjects]


def _eval_loss(net: PdNet, x: np.ndarray, y: np.ndarray) -> float:
    logits = predict_logits(net, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def train(
    net: PdNet,
    chunks: Sequence[SpeechChunk],
    plan: SplitPlan | None = None,
    hyper: Hyper = Hyper(),
) -> TrainResult:
    """Mini-batch Adam on softmax cross-entropy with early stopping.

    When ``plan`` is given only chunks of its training subjects are used.
    A seeded ``val_frac`` slice of those chunks drives early stopping (the
    training loss does when the slice would be empty); the best-scoring
    state is restored before returning.
    """
    if plan is not None:
        chunks = select_subjects(chunks, plan.train_subjects)
        assert not {c.subject_id for c in chunks} & plan.test_subjects
    if not chunks:
        raise EmptyTrainingSet("no training chunks")
    x, y = chunk_arrays(chunks)
    rng = np.random.default_rng(hyper.seed)

    n_val = int(len(x) * hyper.val_frac) if len(x) >= 10 else 0
    order = rng.permutation(len(x))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x_val, y_val = x[val_idx], y[val_idx]

    opt = Adam(net.parameters(), lr=hyper.lr)
    losses: list[float] = []
    val_losses: list[float] = []
    best, best_epoch, best_state = math.inf, 0, net.copy_state()
    stale = 0
    stopped_early = False

    for epoch in range(hyper.epochs):
        perm = tr_idx[rng.permutation(len(tr_idx))]
        total = 0.0
        for i in range(0, len(perm), hyper.batch_size):
            idx = perm[i : i + hyper.batch_size]
            net.zero_grad()
            fwd = forward(net, x[idx], train=True)
            loss, _ = softmax_xent(fwd.tape, fwd.logits, y[idx])
            if not np.isfinite(loss.values):
                raise DivergenceDetected(f"loss became {float(loss.values)} at epoch {epoch + 1}")
            fwd.tape.backward(loss)
            opt.step()
            total += float(loss.values) * len(idx)
        losses.append(total / len(perm))

        monitor = _eval_loss(net, x_val, y_val) if n_val else losses[-1]
        if not np.isfinite(monitor):
            raise DivergenceDetected(f"validation loss became {monitor} at epoch {epoch + 1}")
        val_losses.append(monitor)
        if monitor < best:
            best, best_epoch, best_state, stale = monitor, epoch + 1, net.copy_state(), 0
        else:
            stale += 1
            if hyper.early_stop_patience and stale >= hyper.early_stop_patience:
                stopped_early = True
                break

    net.load_state(best_state)
    return TrainResult(net, losses, val_losses, best_epoch, stopped_early)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()

    @classmethod
    def from_confusion(cls, tp: int, fp: int, fn: int, tn: int) -> "Metrics":
        total = tp + fp + fn + tn
        if total == 0:
            raise EmptyTestSet("no predictions")
        flags = []
        if tp + fp:
            precision = tp / (tp + fp)
        else:
            precision = 0.0
            flags.append("precision_undefined")
        if tp + fn:
            recall = tp / (tp + fn)
        else:
            recall = 0.0
            flags.append("recall_undefined")
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp, fp, fn, tn, (tp + tn) / total, precision, recall, f1, tuple(flags))

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        t = np.asarray(y_true, dtype=np.int64)
        p = np.asarray(y_pred, dtype=np.int64)
        if len(t) != len(p):
            raise LengthMismatch(f"{len(t)} labels vs {len(p)} predictions")
        return cls.from_confusion(
            int(((t == 1) & (p == 1)).sum()),
            int(((t == 0) & (p == 1)).sum()),
            int(((t == 1) & (p == 0)).sum()),
            int(((t == 0) & (p == 0)).sum()),
        )

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRIC_NAMES}

    def to_json(self) -> dict:
        out = {"confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}}
        out.update(self.values())
        out["flags"] = list(self.flags)
        return out


def decide(logits: np.ndarray) -> np.ndarray:
    """Argmax over (HC, PD) logits; exact ties go to HC."""
    logits = np.asarray(logits)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def vote_by_recording(chunks: Sequence[SpeechChunk], preds) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Majority vote of chunk predictions per recording (ties go to HC)."""
    groups: dict[str, list[int]] = defaultdict(list)
    truth: dict[str, int] = {}
    for c, p in zip(chunks, preds):
        groups[c.recording_ref].append(int(p))
        truth[c.recording_ref] = c.label.index
    refs = sorted(groups)
    y_true = np.array([truth[r] for r in refs], dtype=np.int64)
    y_pred = np.array([int(2 * sum(groups[r]) > len(groups[r])) for r in refs], dtype=np.int64)
    return y_true, y_pred, refs


def evaluate(net: PdNet, test_chunks: Sequence[SpeechChunk]) -> Metrics:
    """Chunk-level eval-mode metrics with PD as the positive class."""
    if not test_chunks:
        raise EmptyTestSet("no test chunks")
    x, y = chunk_arrays(test_chunks)
    return Metrics.from_predictions(y, decide(predict_logits(net, x)))


def evaluate_recordings(net: PdNet, test_chunks: Sequence[SpeechChunk]) -> Metrics:
    if not test_chunks:
        raise EmptyTestSet("no test chunks")
    x, _ = chunk_arrays(test_chunks)
    y_true, y_pred, _ = vote_by_recording(test_chunks, decide(predict_logits(net, x)))
    return Metrics.from_predictions(y_true, y_pred)


# ---------------------------------------------------------------------------
# aggregation and significance


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


@dataclass
class EvalReport:
    per_iteration: list[Metrics]
    mean: dict[str, float]
    std: dict[str, float]
    flags: tuple[str, ...] = ()
    p_values: dict[str, float] = field(default_factory=dict)

    def cells(self) -> dict[str, str]:
        return {m: format_cell(self.mean[m], self.std[m]) for m in METRIC_NAMES}

    def to_json(self) -> dict:
        return {
            "per_iteration": [m.to_json() for m in self.per_iteration],
            "mean": self.mean,
            "std": self.std,
            "cells": self.cells(),
            "flags": list(self.flags),
            "p_values": self.p_values,
        }


def aggregate(reports: Sequence[Metrics]) -> EvalReport:
    """Mean and sample standard deviation (denominator R-1) per metric.

    Sums use ``math.fsum`` so the result does not depend on report order.
    """
    if not reports:
        raise EmptyTestSet("nothing to aggregate")
    r = len(reports)
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(m, name) for m in reports]
        mu = math.fsum(vals) / r
        mean[name] = mu
        std[name] = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / (r - 1)) if r > 1 else 0.0
    flags = ("single_iteration_std_undefined",) if r == 1 else ()
    return EvalReport(list(reports), mean, std, flags)


@dataclass(frozen=True)
class Significance:
    p_value: float
    statistic: float
    degenerate: bool = False

    def describe(self) -> str:
        if self.degenerate and self.p_value == 0.0:
            return "p < 1e-12 (zero-variance differences)"
        return f"p = {self.p_value:.3g}"


def paired_significance(ours: Sequence[float], baseline: Sequence[float]) -> Significance:
    """Two-sided paired t-test over per-iteration differences.

    All-zero differences give p = 1; constant nonzero differences give
    p = 0 with the degenerate flag set (the t statistic is unbounded).
    """
    a = np.asarray(ours, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    d = a - b
    n = len(d)
    if n == 0 or np.all(d == 0):
        return Significance(1.0, 0.0, degenerate=n < 2)
    if n < 2:
        return Significance(1.0, 0.0, degenerate=True)
    sd = np.std(d, ddof=1)
    if sd == 0:
        return Significance(0.0, math.copysign(math.inf, d.mean()), degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return Significance(float(min(1.0, p)), float(t))
