"""Acceptance gate: one PASS/FAIL line per criterion, printed in the terminal summary.

The synthetic end-to-end criteria train 9 networks each at chunk length 1024
and take a few minutes; everything else runs in seconds.
"""

import csv
import json
import os
import re
import struct
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from oracles import brute_knn, t_two_sided
from pdvoice.autodiff import BnParams, Tape, Tensor, affine, batchnorm, conv1d, flatten, relu, softmax_xent
from pdvoice.cli import main as cli_main
from pdvoice.config import RunConfig, with_synth
from pdvoice.gradcam import (
    SegmentImportance,
    grad_cam_forward,
    importance_weights,
    normalize_per_recording,
    select_top_decile,
    weighted_map,
)
from pdvoice.knn import knn_predict
from pdvoice.model import forward, init, param_count, save
from pdvoice.pipeline import build_chunks, fit_chunks, run_experiment, write_run
from pdvoice.signal_io import load_manifest
from pdvoice.synthgen import generate
from pdvoice.training import Metrics, paired_significance

from conftest import numeric_grad, rel_error

GRAD_TOL = 1e-4
CAM_TOL = 1e-12
H = 1e-5
P_TOL = 1e-6


def verdict(report_line, number, title, ok, detail):
    report_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
    assert ok, detail


# 1 -----------------------------------------------------------------------


def _op_instance(kind, rng):
    """Return (build(tape) -> Tensor, tensors to check) for one random instance."""
    if kind == "conv1d":
        n, c_in, c_out, t = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 9)
        x, w, b = (Tensor(rng.standard_normal(s)) for s in ((n, c_in, t), (c_out, c_in, 3), (c_out,)))
        return (lambda tape: conv1d(tape, x, w, b)), [x, w, b]
    if kind in ("bn_train", "bn_eval"):
        c = int(rng.integers(1, 4))
        p = BnParams.create(c)
        p.gamma.values[:] = rng.uniform(0.5, 2, c)
        p.beta.values[:] = rng.standard_normal(c)
        stats = (rng.standard_normal(c), rng.uniform(0.5, 2, c))
        x = Tensor(rng.standard_normal((rng.integers(2, 4), c, rng.integers(2, 6))) * 2 + 1)
        train = kind == "bn_train"

        def build(tape):
            p.running_mean, p.running_var = stats[0].copy(), stats[1].copy()
            return batchnorm(tape, x, p, train)

        return build, [x, p.gamma, p.beta]
    if kind == "relu":
        v = rng.standard_normal((2, 3, 6))
        v[np.abs(v) < 1e-3] = 0.5  # keep away from the kink
        x = Tensor(v)
        return (lambda tape: relu(tape, x)), [x]
    if kind == "affine":
        n, f, o = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 4)
        x, w, b = (Tensor(rng.standard_normal(s)) for s in ((n, f), (o, f), (o,)))
        return (lambda tape: affine(tape, x, w, b)), [x, w, b]
    if kind == "softmax_xent":
        n = int(rng.integers(1, 6))
        z = Tensor(rng.standard_normal((n, 2)) * 3)
        y = rng.integers(0, 2, n)
        return (lambda tape: softmax_xent(tape, z, y)[0]), [z]
    raise ValueError(kind)


def _op_error(kind, rng):
    build, tensors = _op_instance(kind, rng)
    tape = Tape()
    out = build(tape)
    w = rng.standard_normal(out.shape)
    tape.backward(out, w)
    analytic, numeric = [], []
    for t in tensors:
        numeric.append(numeric_grad(lambda: float(np.sum(build(None).values * w)), t.values).ravel())
        analytic.append(t.grad.ravel())
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def _net_error(train, rng, probes=24):
    net = init(8, seed=int(rng.integers(1 << 30)))
    for bn in (net.bn1, net.bn2):
        bn.gamma.values[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta.values[:] = rng.standard_normal(bn.beta.shape) * 0.1
        bn.running_mean = rng.standard_normal(bn.gamma.shape) * 0.1
        bn.running_var = rng.uniform(0.5, 2, bn.gamma.shape)
    stats = [a.copy() for a in (net.bn1.running_mean, net.bn1.running_var, net.bn2.running_mean, net.bn2.running_var)]
    x = rng.standard_normal((3, 8))
    y = rng.integers(0, 2, 3)

    def probe():
        net.bn1.running_mean, net.bn1.running_var, net.bn2.running_mean, net.bn2.running_var = (a.copy() for a in stats)
        f = forward(net, x, train=train)
        mask = np.concatenate([(f.hidden.values > 0).ravel(), (f.activations.values > 0).ravel()])
        return softmax_xent(None, f.logits, y)[0].values.item(), mask

    probe()
    fwd = forward(net, x, train=train)
    loss, _ = softmax_xent(fwd.tape, fwd.logits, y)
    fwd.tape.backward(loss)
    analytic, numeric, skipped = [], [], 0
    for p in net.parameters():
        flat = p.values.reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, probes), replace=False):
            old = flat[i]
            flat[i] = old + H
            up, mask_up = probe()
            flat[i] = old - H
            down, mask_down = probe()
            flat[i] = old
            if not np.array_equal(mask_up, mask_down):
                skipped += 1  # a ReLU input crossed zero inside the stencil
                continue
            numeric.append((up - down) / (2 * H))
            analytic.append(p.grad.reshape(-1)[i])
    return rel_error(np.array(analytic), np.array(numeric)), skipped


def test_criterion_1_gradient_correctness(report_line):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst: dict[str, float] = {}
    count = kink_skips = 0
    for kind in ("conv1d", "bn_train", "bn_eval", "relu", "affine", "softmax_xent"):
        errs = [_op_error(kind, rng) for _ in range(20)]
        worst[kind] = max(errs)
        count += len(errs)
    for train in (True, False):
        results = [_net_error(train, rng) for _ in range(10)]
        worst[f"pdnet_{'train' if train else 'eval'}"] = max(e for e, _ in results)
        kink_skips += sum(k for _, k in results)
        count += len(results)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < GRAD_TOL and count >= 100 and elapsed < 60
    detail = f"{count} instances, max rel err {top:.2e} (< {GRAD_TOL:g}), {elapsed:.1f} s (< 60 s); " + ", ".join(
        f"{k} {v:.1e}" for k, v in worst.items()
    ) + f"; {kink_skips} network probes skipped at ReLU kinks"
    verdict(report_line, 1, "gradient correctness", ok, detail)


# 2 -----------------------------------------------------------------------


def test_criterion_2_architecture(report_line, tmp_path, rng):
    problems = []
    for T in (3, 4, 5, 8, 31, 100, 1024):
        net = init(T, seed=T)
        fwd = forward(net, rng.standard_normal((2, T)))
        if fwd.hidden.shape != (2, 48, T) or fwd.activations.shape != (2, 96, T) or fwd.logits.shape != (2, 2):
            problems.append(f"T={T}: {fwd.hidden.shape} {fwd.activations.shape}")
        formula = 48 * 1 * 3 + 48 + 2 * 48 * 2 + 96 * 48 * 3 + 96 + 2 * 96 * 2 + 2 * 96 * T + 2
        path = tmp_path / f"m{T}.pdn"
        save(net, path)
        data = path.read_bytes()
        magic, _, chunk_len, _, n_floats, meta_len = struct.unpack_from("<4sIIqQI", data)
        size_ok = len(data) == struct.calcsize("<4sIIqQI") + meta_len + 8 * formula + 4
        if not (magic == b"PDN1" and chunk_len == T and param_count(T) == formula == n_floats and size_ok):
            problems.append(f"T={T}: count {param_count(T)} formula {formula} file {n_floats}")
    verdict(report_line, 2, "architecture fidelity", not problems,
            "shapes (48,T)/(96,T) and serialized parameter counts match for T in 3..1024" if not problems else "; ".join(problems))


# 3 -----------------------------------------------------------------------


def _seg(v):
    return SegmentImportance("r", (), raw_score=float(v))


def test_criterion_3_gradcam_algebra(report_line):
    errs = []
    # importance weights and map from all-ones gradients
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    alpha = importance_weights(np.ones((2, 2)))
    errs.append(np.max(np.abs(weighted_map(alpha, A) - [4.0, 6.0])))
    errs.append(np.max(np.abs(weighted_map(np.array([1.0, -1.0]), A) - [-2.0, -2.0])))

    # toy net: x -> conv (one 1x1x3 kernel) -> relu -> linear head, y^c hand-derived
    x = Tensor(np.array([[[1.0, -2.0, 0.5, 3.0]]]))
    w = Tensor(np.array([[[0.5, 1.0, -0.25]]]))
    head = Tensor(np.array([[1.0, 0.0, -1.0, 2.0], [0.5, -1.5, 2.0, 1.0]]))
    tape = Tape()
    act = relu(tape, conv1d(tape, x, w, Tensor(np.zeros(1))))
    logits = affine(tape, flatten(tape, act), head, Tensor(np.zeros(2)))
    res = grad_cam_forward(SimpleNamespace(logits=logits, tape=tape, activations=act), [1])[0]
    # conv by hand (padding 1): [0*.5+1*1+(-2)*(-.25), 1*.5+(-2)*1+.5*(-.25), -2*.5+.5*1+3*(-.25), .5*.5+3*1+0]
    hand_A = np.maximum([1.5, -1.625, -1.25, 3.25], 0.0)
    hand_alpha = np.mean([0.5, -1.5, 2.0, 1.0])
    errs.append(np.max(np.abs(act.values[0, 0] - hand_A)))
    errs.append(abs(res.alpha[0] - hand_alpha))
    errs.append(np.max(np.abs(res.map - hand_alpha * hand_A)))
    hand_ok = max(errs) <= CAM_TOL

    rng = np.random.default_rng(7)
    lin_fail = sel_fail = 0
    for _ in range(1000):
        k, t = rng.integers(1, 8), rng.integers(1, 30)
        a, acts = rng.standard_normal(k), rng.standard_normal((k, t))
        lam = float(rng.choice([2.0, 0.5, -4.0, 8.0, 0.25]))
        if not np.array_equal(weighted_map(lam * a, acts), lam * weighted_map(a, acts)):
            lin_fail += 1
        raw = rng.standard_normal(rng.integers(1, 40))
        pos = float(rng.uniform(1e-3, 1e3))
        base = select_top_decile(normalize_per_recording([_seg(v) for v in raw]))
        scaled = select_top_decile(normalize_per_recording([_seg(v * pos) for v in raw]))
        if [s.selected for s in base] != [s.selected for s in scaled]:
            sel_fail += 1
    ok = hand_ok and lin_fail == 0 and sel_fail == 0
    verdict(report_line, 3, "Grad-CAM algebra", ok,
            f"hand cases max err {max(errs):.1e} (<= {CAM_TOL:g}); linearity failures {lin_fail}/1000 "
            "(power-of-two scale factors, exact); "
            f"positive-scaling selection failures {sel_fail}/1000")


# 4 and 5 -----------------------------------------------------------------


def _synthetic_run(cfg, out):
    start = time.perf_counter()
    corpus = generate(cfg.synth, out)
    manifest = load_manifest(corpus.manifest_path, cfg.working_rate)
    chunks = fit_chunks(build_chunks(manifest, cfg), cfg.segment.chunk_len)
    exp = run_experiment(chunks, cfg, explain=True)
    return corpus, exp, time.perf_counter() - start


@pytest.fixture(scope="module")
def planted_run(tmp_path_factory):
    cfg = RunConfig()  # 10+10 subjects, tremor depth 0.5, two burst words, hybrid, chunk_len 1024, R = 9
    assert cfg.synth.n_subjects == 10 and cfg.synth.tremor_depth == 0.5 and cfg.segment.strategy == "hybrid"
    return (cfg, *_synthetic_run(cfg, tmp_path_factory.mktemp("planted")))


@pytest.mark.slow
def test_criterion_4_synthetic_end_to_end(report_line, planted_run):
    cfg, corpus, exp, elapsed = planted_run
    rec_acc = exp.report["summary"]["cnn"]["recording"]["mean"]["accuracy"]
    chunk_acc = exp.report["summary"]["cnn"]["chunk"]["mean"]["accuracy"]
    selected = [(a.recording, s.index) for a in exp.attributions if a.label.value == "PD"
                for s in a.segments if s.selected]
    hits = sum(idx in corpus.burst_chunks[rec] for rec, idx in selected)
    frac = hits / len(selected) if selected else 0.0
    ok = rec_acc >= 0.95 and frac >= 0.70 and elapsed < 600
    verdict(report_line, 4, "synthetic end-to-end", ok,
            f"mean recording accuracy {rec_acc:.3f} (>= 0.95; chunk {chunk_acc:.3f}), "
            f"selected PD chunks on planted bursts {hits}/{len(selected)} = {frac:.0%} (>= 70%), "
            f"{elapsed:.0f} s (< 600 s)")


@pytest.mark.slow
def test_criterion_5_null_control(report_line, tmp_path):
    cfg = with_synth(RunConfig(), tremor_depth=0.0, n_burst_words=0)
    _, exp, elapsed = _synthetic_run(cfg, tmp_path / "null")
    rec_acc = exp.report["summary"]["cnn"]["recording"]["mean"]["accuracy"]
    chunk_acc = exp.report["summary"]["cnn"]["chunk"]["mean"]["accuracy"]
    ok = 0.4 <= rec_acc <= 0.6 and 0.4 <= chunk_acc <= 0.6
    verdict(report_line, 5, "null control", ok,
            f"mean recording accuracy {rec_acc:.3f}, chunk accuracy {chunk_acc:.3f} (both in [0.4, 0.6]), {elapsed:.0f} s")


# 6 -----------------------------------------------------------------------


def test_criterion_6_metrics_oracle(report_line):
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(1, 80))
        truth = rng.integers(0, 2, n).tolist()
        pred = rng.integers(0, 2, n).tolist()
        tp = sum(1 for t, p in zip(truth, pred) if t == 1 and p == 1)
        fp = sum(1 for t, p in zip(truth, pred) if t == 0 and p == 1)
        fn = sum(1 for t, p in zip(truth, pred) if t == 1 and p == 0)
        tn = n - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        m = Metrics.from_predictions(truth, pred)
        if (m.tp, m.fp, m.fn, m.tn) != (tp, fp, fn, tn) or m.values() != {
            "accuracy": (tp + tn) / n, "precision": prec, "recall": rec, "f1": f1
        }:
            mismatches += 1
    p_err = 0.0
    cases = [np.array([2, -1, 3, 0, 1, 2, -2, 1, 2], dtype=float)]
    cases += [rng.standard_normal(9) * rng.uniform(0.01, 0.1) + rng.uniform(-0.05, 0.05) for _ in range(30)]
    for d in cases:
        base = rng.uniform(0.5, 0.9, len(d))
        sig = paired_significance(base + d, base)
        t = (base + d - base).mean() / ((base + d - base).std(ddof=1) / np.sqrt(len(d)))
        p_err = max(p_err, abs(sig.p_value - t_two_sided(t, len(d) - 1)))
    ok = mismatches == 0 and p_err < P_TOL
    verdict(report_line, 6, "metrics oracle", ok,
            f"{50 - mismatches}/50 confusion sets exact; max |p - oracle| {p_err:.1e} over {len(cases)} cases (< {P_TOL:g})")


# 7 -----------------------------------------------------------------------

SMALL = {
    "seed": 5,
    "synth": {"n_subjects": 4, "words_per_recording": 6},
    "segment": {"chunk_len": 128},
    "train": {"epochs": 3},
    "evaluate": {"iterations": 3},
}


def test_criterion_7_determinism(report_line, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert cli_main(["synth", "--config", str(cfg), "--out", str(root / "corpus")]) == 0
        assert cli_main(["train", "--config", str(cfg), "--manifest", str(root / "corpus" / "manifest.json"),
                         "--out", str(root / "run")]) == 0
        runs.append(root / "run")
    files = sorted(str(p.relative_to(runs[0])) for p in runs[0].rglob("*") if p.is_file())
    other = sorted(str(p.relative_to(runs[1])) for p in runs[1].rglob("*") if p.is_file())
    differing = [f for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    models = [f for f in files if f.endswith(".pdn")]
    ok = files == other and not differing and "report.json" in files and len(models) == 3
    verdict(report_line, 7, "determinism", ok,
            f"{len(files)} artifacts (report.json, {len(models)} model files, tables, heatmaps) byte-identical"
            if ok else f"differing: {differing}")


# 8 -----------------------------------------------------------------------

REAL_MANIFEST = os.environ.get("PDVOICE_REAL_MANIFEST")


def _check_metrics_table(path):
    rows = list(csv.reader(Path(path).open(encoding="utf-8")))
    header_ok = rows[0] == ["Model", "Level", "Accuracy", "Precision", "Recall", "F1-Score"]
    cell = re.compile(r"^\d{1,3}\.\d{2} ± \d{1,3}\.\d{2}$")
    return header_ok and len(rows) == 5 and all(cell.match(c) for r in rows[1:] for c in r[2:]), rows


@pytest.mark.slow
def test_criterion_8_real_corpus_format(report_line, tmp_path, planted_run):
    if REAL_MANIFEST:
        cfg = RunConfig()
        manifest = load_manifest(REAL_MANIFEST, cfg.working_rate)
        chunks = fit_chunks(build_chunks(manifest, cfg), cfg.segment.chunk_len)
        exp = run_experiment(chunks, cfg, explain=True)
        write_run(exp, tmp_path / "real")
        ok, rows = _check_metrics_table(tmp_path / "real" / "metrics.csv")
        cnn = [r for r in rows if r[0] == "CNN" and r[1] == "recording"][0]
        verdict(report_line, 8, "real corpus (conditional)", ok,
                f"CNN recording-level accuracy {cnn[2]}, precision {cnn[3]} "
                "(published figures are a reference only, no tolerance promised)")
        return
    _, _, exp, _ = planted_run
    write_run(exp, tmp_path / "synthetic")
    ok, rows = _check_metrics_table(tmp_path / "synthetic" / "metrics.csv")
    verdict(report_line, 8, "real corpus (conditional)", ok,
            "corpus not supplied (set PDVOICE_REAL_MANIFEST); metrics table layout and cells verified on the synthetic run")


# 9 -----------------------------------------------------------------------


def test_criterion_9_knn_oracle(report_line):
    rng = np.random.default_rng(31)
    instances = queries = disagreements = 0
    for _ in range(200):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(1, 5))
        tied = rng.random() < 0.5
        train_x = (rng.integers(-3, 4, (n, d)) if tied else rng.standard_normal((n, d))).astype(float)
        train_y = rng.choice(["HC", "PD"], n).tolist()
        q = (rng.integers(-3, 4, (5, d)) if tied else rng.standard_normal((5, d))).astype(float)
        k = int(rng.choice([k for k in (1, 3, 5, 7, 9) if k <= n]))
        got = knn_predict(train_x, train_y, q, k)
        want = [brute_knn(train_x.tolist(), train_y, row.tolist(), k) for row in q]
        disagreements += sum(g != w for g, w in zip(got, want))
        instances += 1
        queries += len(q)
    verdict(report_line, 9, "KNN brute-force oracle", disagreements == 0,
            f"{instances} instances (<= 200 training points), {queries} queries, {disagreements} disagreements")
