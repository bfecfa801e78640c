"""Cutting recordings into word chunks.

Three strategies: energy-envelope silence detection, fixed groups of
consecutive ASR word timestamps, and a hybrid that moves each word-group
boundary to the quietest nearby envelope frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    EmptyAudio,
    EmptyChunk,
    EmptyTimestamps,
    InputError,
    NoSpeechDetected,
    TimestampOutOfRange,
)
from .signal_io import AudioRecording, Kind, Label

DEFAULT_CHUNK_LEN = 1024
MIN_CHUNK_LEN = 3

# float slack when comparing timestamps against the recording duration
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class WordTimestamp:
    word: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class EnvelopeParams:
    window_s: float = 0.025
    hop_s: float = 0.010
    rel_threshold: float = 0.1
    min_silence_s: float = 0.15

    def __post_init__(self):
        if self.window_s <= 0 or self.hop_s <= 0:
            raise ValueError("window_s and hop_s must be positive")
        if not 0 < self.rel_threshold < 1:
            raise ValueError("rel_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class SpeechChunk:
    samples: np.ndarray
    start_s: float
    end_s: float
    words: tuple[str, ...] = ()
    recording_ref: str = ""
    label: Label = Label.HC
    subject_id: str = ""
    kind: Kind = Kind.TEXT


def load_timestamps(path) -> list[WordTimestamp]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        return [WordTimestamp(str(o["word"]), float(o["start"]), float(o["end"])) for o in doc]
    except FileNotFoundError as exc:
        raise InputError(f"missing timestamp file {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed timestamp file: {exc}") from exc


def save_timestamps(ts: list[WordTimestamp], path) -> None:
    doc = [{"word": t.word, "start": t.start_s, "end": t.end_s} for t in ts]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def rms_envelope(rec: AudioRecording, p: EnvelopeParams = EnvelopeParams()):
    """Sliding-window RMS; returns ``(times, rms)`` with times at window centers."""
    x = np.asarray(rec.samples, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise EmptyAudio(rec.source_path)
    win = min(n, max(1, int(round(p.window_s * rec.sample_rate))))
    hop = max(1, int(round(p.hop_s * rec.sample_rate)))
    n_frames = max(1, (n - win) // hop + 1)
    csum = np.concatenate(([0.0], np.cumsum(x * x)))
    starts = np.arange(n_frames) * hop
    energy = (csum[starts + win] - csum[starts]) / win
    rms = np.sqrt(np.maximum(energy, 0.0))
    times = (starts + win / 2.0) / rec.sample_rate
    return times, rms


def _make_chunk(rec: AudioRecording, start_s: float, end_s: float, words=()) -> SpeechChunk:
    a = int(round(start_s * rec.sample_rate))
    b = max(a + 1, int(round(end_s * rec.sample_rate)))
    return SpeechChunk(
        samples=rec.samples[a:b],
        start_s=float(start_s),
        end_s=float(end_s),
        words=tuple(words),
        recording_ref=rec.recording_id,
        label=rec.label,
        subject_id=rec.subject_id,
        kind=rec.kind,
    )


def segment_by_silence(rec: AudioRecording, p: EnvelopeParams = EnvelopeParams()) -> list[SpeechChunk]:
    times, rms = rms_envelope(rec, p)
    peak = rms.max()
    if peak <= 0:
        raise NoSpeechDetected(rec.source_path)
    active = rms >= p.rel_threshold * peak
    if not active.any():
        raise NoSpeechDetected(rec.source_path)

    edges = np.diff(np.concatenate(([0], active.astype(np.int8), [0])))
    run_starts = np.flatnonzero(edges == 1)
    run_ends = np.flatnonzero(edges == -1) - 1
    duration = rec.duration
    hop = p.hop_s

    runs: list[list[float]] = []
    for i, j in zip(run_starts, run_ends):
        start = times[i] if i > 0 else 0.0
        end = times[j] if j < len(times) - 1 else duration
        if runs and start - runs[-1][1] < p.min_silence_s:
            runs[-1][1] = end
        else:
            runs.append([start, end])

    chunks = []
    for start, end in runs:
        if end <= start:
            end = min(duration, start + hop)
        chunks.append(_make_chunk(rec, start, end))
    return chunks


def _check_timestamps(rec: AudioRecording, ts: list[WordTimestamp]) -> None:
    if not ts:
        raise EmptyTimestamps(rec.source_path)
    duration = rec.duration
    prev_end = 0.0
    for t in ts:
        if t.start_s < 0 or t.end_s <= t.start_s or t.end_s > duration + _TIME_EPS:
            raise TimestampOutOfRange(
                f"{t.word!r} [{t.start_s}, {t.end_s}] outside [0, {duration}]"
            )
        if t.start_s < prev_end - _TIME_EPS:
            raise TimestampOutOfRange(f"{t.word!r} overlaps or precedes the previous word")
        prev_end = t.end_s


def _word_groups(ts: list[WordTimestamp], words_per_chunk: int):
    if words_per_chunk < 1:
        raise ValueError("words_per_chunk must be positive")
    for i in range(0, len(ts), words_per_chunk):
        group = ts[i : i + words_per_chunk]
        yield group[0].start_s, group[-1].end_s, [t.word for t in group]


def segment_by_words(
    rec: AudioRecording, ts: list[WordTimestamp], words_per_chunk: int = 1
) -> list[SpeechChunk]:
    _check_timestamps(rec, ts)
    return [_make_chunk(rec, a, b, w) for a, b, w in _word_groups(ts, words_per_chunk)]


def _snap(t0: float, times: np.ndarray, rms: np.ndarray, tol: float) -> float:
    window = np.flatnonzero(np.abs(times - t0) <= tol + _TIME_EPS)
    if len(window) == 0:
        return t0
    best = window[np.argmin(rms[window])]
    here = np.interp(t0, times, rms)
    # cumulative-sum round-off makes a flat envelope wobble; require a real dip
    return float(times[best]) if rms[best] < here * (1 - 1e-9) - 1e-12 else t0


def segment_hybrid(
    rec: AudioRecording,
    ts: list[WordTimestamp],
    words_per_chunk: int = 1,
    p: EnvelopeParams = EnvelopeParams(),
    snap_tolerance_s: float = 0.05,
) -> list[SpeechChunk]:
    _check_timestamps(rec, ts)
    groups = list(_word_groups(ts, words_per_chunk))
    if snap_tolerance_s <= 0:
        return [_make_chunk(rec, a, b, w) for a, b, w in groups]

    times, rms = rms_envelope(rec, p)
    duration = rec.duration
    # flat boundary list: start0, end0, start1, end1, ...
    orig = [t for a, b, _ in groups for t in (a, b)]
    snapped = [min(duration, max(0.0, _snap(t, times, rms, snap_tolerance_s))) for t in orig]

    changed = True
    while changed:
        changed = False
        for j in range(len(snapped) - 1):
            within_chunk = j % 2 == 0
            lo, hi = snapped[j], snapped[j + 1]
            bad = lo >= hi if within_chunk else lo > hi
            if bad and (snapped[j] != orig[j] or snapped[j + 1] != orig[j + 1]):
                snapped[j], snapped[j + 1] = orig[j], orig[j + 1]
                changed = True

    return [
        _make_chunk(rec, snapped[2 * i], snapped[2 * i + 1], w)
        for i, (_, _, w) in enumerate(groups)
    ]


def fit_chunk(chunk: SpeechChunk, chunk_len: int = DEFAULT_CHUNK_LEN) -> SpeechChunk:
    """Pad or shrink a chunk to exactly ``chunk_len`` samples.

    Short chunks get symmetric zero padding (extra sample on the right);
    long chunks are linearly resampled so both endpoints are kept.
    """
    x = np.asarray(chunk.samples, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise EmptyChunk(chunk.recording_ref)
    if n == chunk_len:
        return chunk
    if n < chunk_len:
        left = (chunk_len - n) // 2
        out = np.zeros(chunk_len)
        out[left : left + n] = x
    else:
        out = np.interp(np.linspace(0.0, n - 1, chunk_len), np.arange(n), x)
    return replace(chunk, samples=out)


def segment_recording(
    rec: AudioRecording,
    strategy: str,
    ts: list[WordTimestamp] | None = None,
    words_per_chunk: int = 1,
    p: EnvelopeParams = EnvelopeParams(),
    snap_tolerance_s: float = 0.05,
) -> list[SpeechChunk]:
    if strategy == "silence":
        return segment_by_silence(rec, p)
    if strategy in ("words", "hybrid") and ts is None:
        raise EmptyTimestamps(f"{rec.source_path}: strategy {strategy!r} needs timestamps")
    if strategy == "words":
        return segment_by_words(rec, ts, words_per_chunk)
    if strategy == "hybrid":
        return segment_hybrid(rec, ts, words_per_chunk, p, snap_tolerance_s)
    raise ValueError(f"unknown strategy {strategy!r}")


def write_chunk_dump(chunks: list[SpeechChunk], jsonl_path) -> None:
    """Write chunk metadata as JSON lines plus a sibling float32 sample file."""
    jsonl_path = Path(jsonl_path)
    bin_path = jsonl_path.with_suffix(".f32")
    offset = 0
    lines = []
    with open(bin_path, "wb") as fh:
        for c in chunks:
            data = np.asarray(c.samples, dtype="<f4")
            fh.write(data.tobytes())
            lines.append(json.dumps({
                "recording": c.recording_ref,
                "subject": c.subject_id,
                "label": c.label.value,
                "kind": c.kind.value,
                "start_s": c.start_s,
                "end_s": c.end_s,
                "words": list(c.words),
                "samples_file": bin_path.name,
                "offset": offset,
                "length": len(data),
            }))
            offset += len(data)
    jsonl_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_chunk_dump(jsonl_path) -> list[SpeechChunk]:
    jsonl_path = Path(jsonl_path)
    if not jsonl_path.is_file():
        raise InputError(f"missing chunk dump {jsonl_path}")
    blobs: dict[str, np.ndarray] = {}
    chunks = []
    for line in jsonl_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            o = json.loads(line)
            name = o["samples_file"]
            if name not in blobs:
                blobs[name] = np.fromfile(jsonl_path.parent / name, dtype="<f4")
            a, n = int(o["offset"]), int(o["length"])
            if a + n > len(blobs[name]):
                raise InputError(f"{jsonl_path}: chunk runs past end of {name}")
            chunks.append(SpeechChunk(
                samples=blobs[name][a : a + n].astype(np.float64),
                start_s=float(o["start_s"]),
                end_s=float(o["end_s"]),
                words=tuple(o["words"]),
                recording_ref=o["recording"],
                label=Label(o["label"]),
                subject_id=o["subject"],
                kind=Kind(o.get("kind", "text")),
            ))
        except (KeyError, ValueError, TypeError, OSError) as exc:
            raise InputError(f"{jsonl_path}: bad chunk record: {exc}") from exc
    return chunks
