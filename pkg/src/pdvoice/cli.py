"""Command-line entry point: ``pdvoice synth|segment|train|explain|report``.

Exit codes: 0 success, 2 input/IO error, 3 config error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, InputError, PdVoiceError
from .model import load as load_model
from .pipeline import (
    build_chunks,
    dump_json,
    explain_recordings,
    fit_chunks,
    run_experiment,
    metrics_rows,
    write_explanations,
    write_run,
    write_metrics_table,
    write_word_table,
    METRICS_HEADER,
)
from .segmentation import read_chunk_dump, write_chunk_dump
from .signal_io import load_manifest
from .synthgen import generate

log = logging.getLogger("pdvoice")


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def cmd_synth(args) -> int:
    cfg = _config(args)
    corpus = generate(cfg.synth, args.out)
    print(corpus.manifest_path)
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(_require_file(args.manifest, "manifest"), cfg.working_rate)
    if args.strategy:
        cfg = load_config(args.config, list(args.set or ()) + [f"segment.strategy={json.dumps(args.strategy)}"])
    chunks = build_chunks(manifest, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_chunk_dump(chunks, out)
    print(f"{len(chunks)} chunks -> {out}")
    return 0


def _load_chunks(args, cfg: RunConfig):
    if args.chunks:
        chunks = read_chunk_dump(_require_file(args.chunks, "chunk dump"))
    else:
        manifest = load_manifest(_require_file(args.manifest, "manifest"), cfg.working_rate)
        chunks = build_chunks(manifest, cfg)
    return fit_chunks(chunks, cfg.segment.chunk_len)


def cmd_train(args) -> int:
    cfg = _config(args)
    chunks = _load_chunks(args, cfg)
    exp = run_experiment(chunks, cfg, explain=not args.no_explain)
    write_run(exp, args.out)
    _print_metrics(exp.report["summary"])
    return 0


def cmd_explain(args) -> int:
    cfg = _config(args)
    model_path = _require_file(args.model, "model file")
    chunks_path = _require_file(args.chunks, "chunk dump")
    net = load_model(model_path)
    chunks = fit_chunks(read_chunk_dump(chunks_path), net.chunk_len)
    attributions = explain_recordings(net, chunks, cfg)
    provenance = {
        "config_hash": net.meta.get("config_hash", cfg.config_hash()),
        "seed": net.seed,
        "model": model_path.name,
    }
    doc = write_explanations(attributions, args.out, cfg, provenance)
    for word, count in doc["pd_word_frequency"]:
        print(f"{word}\t{count}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    report = json.loads(_require_file(run / "report.json", "run report").read_text(encoding="utf-8"))
    cfg_hash = report["config_hash"]
    for name in report.get("model_files", []):
        meta_hash = load_model(_require_file(run / name, "model file")).meta.get("config_hash")
        if meta_hash != cfg_hash:
            raise ConfigError(f"{name} has config hash {meta_hash}, report has {cfg_hash}")
    merged = {
        "tool_version": __version__,
        "config_hash": cfg_hash,
        "seed": report["seed"],
        "metrics": {"header": METRICS_HEADER, "rows": metrics_rows(report["summary"])},
        "significance_vs_knn": report["significance_vs_knn"],
    }
    explain_path = run / "explain" / "explain.json"
    if explain_path.is_file():
        explain = json.loads(explain_path.read_text(encoding="utf-8"))
        if explain.get("config_hash") != cfg_hash:
            raise ConfigError(f"explain.json has config hash {explain.get('config_hash')}, report has {cfg_hash}")
        merged["top_words"] = {"header": ["Word", "Freq."], "rows": explain["pd_word_frequency"]}

    out = Path(args.out) if args.out else run / "merged"
    out.mkdir(parents=True, exist_ok=True)
    dump_json(merged, out / "summary.json")
    write_metrics_table(report["summary"], out / "metrics.csv")
    if "top_words" in merged:
        write_word_table(merged["top_words"]["rows"], out / "top_words.csv")
    _print_metrics(report["summary"])
    return 0


def _print_metrics(summary: dict) -> None:
    rows = [METRICS_HEADER] + metrics_rows(summary)
    widths = [max(len(r[i]) for r in rows) for i in range(len(METRICS_HEADER))]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdvoice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pdvoice {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON or TOML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=5 (repeatable)")
        return p

    p = with_config(sub.add_parser("synth", help="generate a synthetic corpus"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("segment", help="cut recordings into word chunks"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=("silence", "words", "hybrid"))
    p.add_argument("--out", required=True, help="chunk dump (.jsonl); samples go to a sibling .f32")
    p.set_defaults(func=cmd_segment)

    p = with_config(sub.add_parser("train", help="repeated holdout training and evaluation"))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--chunks")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--no-explain", action="store_true", help="skip Grad-CAM on the test sets")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("explain", help="Grad-CAM attributions for a trained model"))
    p.add_argument("--model", required=True)
    p.add_argument("--chunks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="merge a run directory into summary tables")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PdVoiceError as exc:
        print(f"pdvoice: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"pdvoice: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
