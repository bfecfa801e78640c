"""End-to-end orchestration: segment, holdout train/eval, explain, write artifacts."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import InputError, ManifestError, PdVoiceError
from .gradcam import (
    GradCamResult,
    SegmentImportance,
    class_averaged_map,
    grad_cam_batch,
    score_recording,
    word_frequency_report,
)
from .heatmap import class_average_svg, recording_heatmap_svg
from .knn import Standardizer, extract_features, knn_predict
from .model import PdNet, init, predict_logits
from .model import save as save_model
from .segmentation import MIN_CHUNK_LEN, SpeechChunk, fit_chunk, load_timestamps, segment_recording
from .signal_io import DatasetManifest, Label, load_recording
from .training import (
    METRIC_NAMES,
    Metrics,
    SplitPlan,
    aggregate,
    chunk_arrays,
    decide,
    make_splits,
    paired_significance,
    train,
    vote_by_recording,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ["Model", "Level", "Accuracy", "Precision", "Recall", "F1-Score"]


def build_chunks(manifest: DatasetManifest, cfg: RunConfig) -> list[SpeechChunk]:
    """Segment every manifest recording with the configured strategy (unfitted)."""
    seg = cfg.segment
    chunks: list[SpeechChunk] = []
    for entry in manifest.entries:
        rec = load_recording(manifest, entry)
        ts = load_timestamps(manifest.resolve(entry.timestamps)) if entry.timestamps else None
        chunks.extend(segment_recording(
            rec, seg.strategy, ts, seg.words_per_chunk, seg.envelope(), seg.snap_tolerance_s
        ))
    return chunks


def fit_chunks(chunks: Sequence[SpeechChunk], chunk_len: int) -> list[SpeechChunk]:
    kept = [c for c in chunks if len(c.samples) >= MIN_CHUNK_LEN]
    if len(kept) < len(chunks):
        log.warning("dropped %d chunk(s) shorter than %d samples", len(chunks) - len(kept), MIN_CHUNK_LEN)
    return [fit_chunk(c, chunk_len) for c in kept]


def subjects_of(chunks: Sequence[SpeechChunk]) -> dict[str, Label]:
    out: dict[str, Label] = {}
    for c in chunks:
        if out.setdefault(c.subject_id, c.label) is not c.label:
            raise ManifestError(f"subject {c.subject_id!r} carries both labels")
    return out


def group_by_recording(chunks: Sequence[SpeechChunk]) -> dict[str, list[SpeechChunk]]:
    groups: dict[str, list[SpeechChunk]] = defaultdict(list)
    for c in chunks:
        groups[c.recording_ref].append(c)
    return {k: sorted(v, key=lambda c: c.start_s) for k, v in sorted(groups.items())}


@dataclass
class Attribution:
    """Grad-CAM outcome for one test recording of one holdout iteration."""

    iteration: int
    recording: str
    label: Label
    segments: list[SegmentImportance]
    results: list[GradCamResult]

    @property
    def duration(self) -> float:
        return max((s.end_s for s in self.segments), default=0.0)


def explain_recordings(
    net: PdNet, chunks: Sequence[SpeechChunk], cfg: RunConfig, iteration: int = 0
) -> list[Attribution]:
    """Grad-CAM each recording on its true-class logit, then normalize and select."""
    out = []
    for ref, cs in group_by_recording(chunks).items():
        label = cs[0].label
        results = grad_cam_batch(net, np.stack([c.samples for c in cs]), label.index)
        segs = score_recording(results, cs, cfg.explain.percentile)
        out.append(Attribution(iteration, ref, label, segs, results))
    return out


def pd_word_frequency(attributions: Sequence[Attribution], top_n: int) -> list[tuple[str, int]]:
    selected = [s for a in attributions if a.label is Label.PD for s in a.segments]
    return word_frequency_report(selected, top_n)


@dataclass
class Experiment:
    cfg: RunConfig
    plans: list[SplitPlan]
    nets: list[PdNet]
    report: dict
    attributions: list[Attribution] = field(default_factory=list)


def _metrics_pair(chunks, chunk_preds) -> dict[str, Metrics]:
    y = np.array([c.label.index for c in chunks])
    y_true, y_pred, _ = vote_by_recording(chunks, chunk_preds)
    return {
        "chunk": Metrics.from_predictions(y, chunk_preds),
        "recording": Metrics.from_predictions(y_true, y_pred),
    }


def _floats(obj):
    """Convert numpy scalars so the report serializes identically everywhere."""
    if isinstance(obj, dict):
        return {str(k): _floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def run_experiment(chunks: Sequence[SpeechChunk], cfg: RunConfig, explain: bool = True) -> Experiment:
    """Repeated subject-disjoint stratified holdout of the CNN and the KNN baseline.

    ``chunks`` must already be fitted to ``cfg.segment.chunk_len``.
    """
    if not chunks:
        raise InputError("no chunks to train on")
    chunk_len = cfg.segment.chunk_len
    if any(len(c.samples) != chunk_len for c in chunks):
        raise InputError(f"chunks must be fitted to length {chunk_len}")
    cfg_hash = cfg.config_hash()
    plans = make_splits(subjects_of(chunks), cfg.evaluate.iterations, cfg.evaluate.test_frac, cfg.seed)
    features = np.stack([extract_features(c).as_array() for c in chunks])
    subject_arr = np.array([c.subject_id for c in chunks])

    nets, iterations, attributions = [], [], []
    per_model: dict[str, dict[str, list[Metrics]]] = {
        m: {"chunk": [], "recording": []} for m in ("cnn", "knn")
    }
    for plan in plans:
        log.info("iteration %d/%d", plan.iteration, len(plans))
        train_mask = np.isin(subject_arr, sorted(plan.train_subjects))
        test_idx = np.flatnonzero(~train_mask)
        test_chunks = [chunks[i] for i in test_idx]
        if not test_chunks:
            raise PdVoiceError(f"iteration {plan.iteration} has no test chunks")

        net = init(chunk_len, plan.seed)
        net.meta = {"config_hash": cfg_hash, "iteration": plan.iteration}
        fit = train(net, chunks, plan, cfg.hyper(plan.seed))
        nets.append(net)

        x_test, _ = chunk_arrays(test_chunks)
        cnn = _metrics_pair(test_chunks, decide(predict_logits(net, x_test)))

        scaler = Standardizer.fit(features[train_mask])
        train_labels = [chunks[i].label.index for i in np.flatnonzero(train_mask)]
        knn_pred = np.array(knn_predict(
            scaler.transform(features[train_mask]), train_labels,
            scaler.transform(features[test_idx]), cfg.evaluate.knn_k,
        ))
        knn = _metrics_pair(test_chunks, knn_pred)

        for level in ("chunk", "recording"):
            per_model["cnn"][level].append(cnn[level])
            per_model["knn"][level].append(knn[level])

        if explain:
            attributions.extend(explain_recordings(net, test_chunks, cfg, plan.iteration))

        iterations.append({
            **plan.to_json(),
            "training": {
                "epochs_run": len(fit.losses),
                "best_epoch": fit.best_epoch,
                "stopped_early": fit.stopped_early,
                "losses": fit.losses,
                "monitor_losses": fit.val_losses,
            },
            "cnn": {lvl: m.to_json() for lvl, m in cnn.items()},
            "knn": {lvl: m.to_json() for lvl, m in knn.items()},
        })

    summary, significance = {}, {}
    for model_name, levels in per_model.items():
        summary[model_name] = {lvl: aggregate(ms).to_json() for lvl, ms in levels.items()}
    for level in ("chunk", "recording"):
        significance[level] = {}
        for metric in METRIC_NAMES:
            sig = paired_significance(
                [getattr(m, metric) for m in per_model["cnn"][level]],
                [getattr(m, metric) for m in per_model["knn"][level]],
            )
            significance[level][metric] = {
                "p_value": sig.p_value,
                "statistic": sig.statistic if np.isfinite(sig.statistic) else None,
                "degenerate": sig.degenerate, "text": sig.describe(),
            }

    report = {
        "tool": "pdvoice",
        "tool_version": __version__,
        "config_hash": cfg_hash,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": {
            "chunks": len(chunks),
            "recordings": len({c.recording_ref for c in chunks}),
            "subjects": len(subjects_of(chunks)),
        },
        "iterations": iterations,
        "summary": summary,
        "significance_vs_knn": significance,
    }
    if explain:
        report["interpretability"] = {
            "selected_segments": sum(s.selected for a in attributions for s in a.segments),
            "pd_word_frequency": [list(r) for r in pd_word_frequency(attributions, cfg.explain.top_n)],
        }
    report = _floats(report)
    return Experiment(cfg, plans, nets, report, attributions)


# ---------------------------------------------------------------------------
# artifact writers


def to_json_text(obj) -> str:
    return json.dumps(_floats(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def dump_json(obj, path) -> None:
    Path(path).write_text(to_json_text(obj), encoding="utf-8")


def metrics_rows(summary: dict) -> list[list[str]]:
    rows = []
    for level in ("recording", "chunk"):
        for name, label in (("knn", "KNN"), ("cnn", "CNN")):
            cells = summary[name][level]["cells"]
            rows.append([label, level] + [cells[m] for m in METRIC_NAMES])
    return rows


def write_metrics_table(summary: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows(summary))


def write_word_table(rows: Sequence[Sequence], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Word", "Freq."])
        w.writerows(rows)


def write_attributions(attributions: Sequence[Attribution], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording", "chunk_start_s", "chunk_end_s", "words", "raw_score", "norm_score", "selected"])
        for a in attributions:
            for s in a.segments:
                w.writerow([a.recording, f"{s.start_s:.6f}", f"{s.end_s:.6f}", " ".join(s.words),
                            repr(s.raw_score), repr(s.score), int(s.selected)])


def _safe_name(ref: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in ref)


def write_explanations(attributions: Sequence[Attribution], out_dir, cfg: RunConfig, provenance: dict) -> dict:
    """Attribution CSVs, per-recording SVGs, class-average SVGs and ``explain.json``."""
    out_dir = Path(out_dir)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    desc = f"pdvoice {__version__} config_hash={provenance.get('config_hash')} seed={provenance.get('seed')}"
    by_iter: dict[int, list[Attribution]] = defaultdict(list)
    for a in attributions:
        by_iter[a.iteration].append(a)

    files = []
    for it, group in sorted(by_iter.items()):
        tag = f"iter{it:02d}" if it else "all"
        name = f"attributions_{tag}.csv"
        write_attributions(group, out_dir / name)
        files.append(name)
        for a in group:
            title = f"{a.recording} ({a.label.value}) iteration {it}" if it else f"{a.recording} ({a.label.value})"
            svg = recording_heatmap_svg(a.segments, a.duration, title, desc)
            (out_dir / "heatmaps" / f"{tag}_{_safe_name(a.recording)}.svg").write_text(svg, encoding="utf-8")
        maps = {}
        for label in Label:
            results = [r for a in group if a.label is label for r in a.results]
            if results:
                maps[label.value] = class_averaged_map(results)
        if len(maps) == 2:
            (out_dir / f"class_average_{tag}.svg").write_text(class_average_svg(maps, desc), encoding="utf-8")

    words = pd_word_frequency(attributions, cfg.explain.top_n)
    write_word_table(words, out_dir / "top_words.csv")
    doc = {
        **provenance,
        "tool_version": __version__,
        "attribution_files": files,
        "selected_segments": sum(s.selected for a in attributions for s in a.segments),
        "pd_word_frequency": [list(r) for r in words],
    }
    dump_json(doc, out_dir / "explain.json")
    return doc


def write_run(exp: Experiment, out_dir) -> None:
    out_dir = Path(out_dir)
    model_files = [f"model_iter{plan.iteration:02d}.pdn" for plan in exp.plans]
    report = dict(exp.report, model_files=model_files)
    text = to_json_text(report)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, net in zip(model_files, exp.nets):
        save_model(net, out_dir / name)
    (out_dir / "report.json").write_text(text, encoding="utf-8")
    write_metrics_table(report["summary"], out_dir / "metrics.csv")
    if exp.attributions:
        write_explanations(exp.attributions, out_dir / "explain", exp.cfg,
                           {"config_hash": report["config_hash"], "seed": report["seed"]})


def split_test_chunks(chunks: Sequence[SpeechChunk], plan: SplitPlan) -> list[SpeechChunk]:
    return [c for c in chunks if c.subject_id in plan.test_subjects]


def with_chunk_len(cfg: RunConfig, chunk_len: int) -> RunConfig:
    return replace(cfg, segment=replace(cfg.segment, chunk_len=chunk_len))
