"""Seeded two-class synthetic speech corpus with planted discriminative bursts.

Every recording "reads" the same word sequence. A word is a short harmonic
tone with a smooth envelope whose timbre depends on the word. The PD-like
class adds slow amplitude modulation (tremor proxy) to every word, and a
designated set of vocabulary words additionally carries a high-frequency
burst. Ground truth lists which chunk indices (one word per chunk) hold a
burst.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .segmentation import WordTimestamp, save_timestamps
from .signal_io import DatasetManifest, Kind, Label, ManifestEntry, save_manifest, write_wav

VOCABULARY = (
    "bado", "pelo", "tisa", "rumo", "fega", "luzi", "kano", "vesu",
    "dori", "mila", "sopa", "gize", "nuta", "rela", "poki", "zavi",
)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 10  # per class
    recordings_per_subject: int = 1
    words_per_recording: int = 10
    word_dur_s: float = 0.25
    gap_dur_s: float = 0.15
    f0_hc: float = 140.0
    f0_pd: float = 140.0
    f0_spread: float = 15.0  # per-subject uniform offset, Hz
    tremor_hz: float = 5.0
    tremor_depth: float = 0.5
    n_burst_words: int = 2
    burst_hz: float = 900.0
    burst_gain: float = 0.4
    burst_dur_s: float = 0.08
    noise_level: float = 0.005
    timestamp_jitter_s: float = 0.01
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("word_dur_s", "gap_dur_s", "burst_dur_s", "f0_hc", "f0_pd", "tremor_hz", "sample_rate"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.n_subjects < 1 or self.recordings_per_subject < 1 or self.words_per_recording < 1:
            problems.append("counts must be at least 1")
        if not 0 <= self.tremor_depth <= 1:
            problems.append("tremor_depth must lie in [0, 1]")
        if not 0 <= self.n_burst_words <= min(len(VOCABULARY), self.words_per_recording):
            problems.append("n_burst_words out of range")
        if self.timestamp_jitter_s < 0 or self.noise_level < 0 or self.f0_spread < 0:
            problems.append("jitter, noise and spread must be non-negative")
        if self.burst_dur_s > self.word_dur_s:
            problems.append("burst_dur_s exceeds word_dur_s")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthCorpus:
    manifest: DatasetManifest
    manifest_path: Path
    # recording path -> chunk indices holding a planted burst
    burst_chunks: dict[str, list[int]]
    burst_words: tuple[str, ...]
    text: tuple[str, ...]


def _word_timbre(word_index: int) -> np.ndarray:
    """Relative amplitudes of the first four harmonics for a vocabulary item."""
    rng = np.random.default_rng(1000 + word_index)
    amps = rng.uniform(0.2, 1.0, size=4)
    return amps / amps.sum()


def _envelope(n: int, sr: int, ramp_s: float = 0.03) -> np.ndarray:
    env = np.ones(n)
    r = min(n // 2, int(ramp_s * sr))
    if r > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = ramp
        env[n - r :] = ramp[::-1]
    return env


def synth_word(
    cfg: SynthConfig,
    word_index: int,
    f0: float,
    pd_like: bool,
    burst: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    sr = cfg.sample_rate
    n = int(round(cfg.word_dur_s * sr))
    t = np.arange(n) / sr
    contour = f0 * (1.0 + 0.05 * np.sin(2 * np.pi * 1.5 * t + 0.3 * word_index))
    phase = 2 * np.pi * np.cumsum(contour) / sr
    tone = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(_word_timbre(word_index)))
    env = _envelope(n, sr)
    if pd_like and cfg.tremor_depth > 0:
        env = env * (1.0 + cfg.tremor_depth * np.sin(2 * np.pi * cfg.tremor_hz * t))
    x = 0.4 * env * tone
    if burst:
        nb = int(round(cfg.burst_dur_s * sr))
        start = (n - nb) // 2
        tb = np.arange(nb) / sr
        b = cfg.burst_gain * _envelope(nb, sr, ramp_s=0.01) * np.sin(2 * np.pi * cfg.burst_hz * tb + rng.uniform(0, 2 * np.pi))
        x[start : start + nb] += b
    return x


def _jitter(spans: list[tuple[float, float]], jitter: float, duration: float, rng) -> list[tuple[float, float]]:
    """Perturb boundaries, then clamp so words stay ordered and non-overlapping."""
    out = []
    prev_end = 0.0
    for i, (a, b) in enumerate(spans):
        a2 = max(prev_end, a + rng.uniform(-jitter, jitter))
        b2 = min(duration, b + rng.uniform(-jitter, jitter))
        if i + 1 < len(spans):
            b2 = min(b2, spans[i + 1][0] - jitter)
        if b2 <= a2:
            b2 = max(b, a2 + 1e-3)
        out.append((a2, b2))
        prev_end = b2
    return out


def generate(cfg: SynthConfig, out_dir) -> SynthCorpus:
    """Write WAVs, timestamp files, ``manifest.json`` and ``ground_truth.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    text_idx = rng.choice(len(VOCABULARY), size=cfg.words_per_recording, replace=cfg.words_per_recording > len(VOCABULARY))
    text = tuple(VOCABULARY[i] for i in text_idx)
    distinct = list(dict.fromkeys(text))
    burst_words = tuple(sorted(str(w) for w in rng.choice(distinct, size=min(cfg.n_burst_words, len(distinct)), replace=False)))

    sr = cfg.sample_rate
    entries = []
    truth: dict[str, list[int]] = {}
    for label in (Label.HC, Label.PD):
        f0_base = cfg.f0_hc if label is Label.HC else cfg.f0_pd
        for s in range(cfg.n_subjects):
            subject = f"{label.value.lower()}{s:02d}"
            f0 = f0_base + rng.uniform(-cfg.f0_spread, cfg.f0_spread)
            gain = rng.uniform(0.8, 1.0)
            for r in range(cfg.recordings_per_subject):
                pd_like = label is Label.PD
                gap = int(round(cfg.gap_dur_s * sr))
                pieces = [np.zeros(gap)]
                spans = []
                bursts = []
                pos = gap
                for w_i, w in enumerate(text):
                    burst = pd_like and w in burst_words
                    word = synth_word(cfg, VOCABULARY.index(w), f0, pd_like, burst, rng)
                    pieces += [word, np.zeros(gap)]
                    spans.append((pos / sr, (pos + len(word)) / sr))
                    if burst:
                        bursts.append(w_i)
                    pos += len(word) + gap
                x = gain * np.concatenate(pieces)
                x = x + cfg.noise_level * rng.standard_normal(len(x))
                duration = len(x) / sr
                spans = _jitter(spans, cfg.timestamp_jitter_s, duration, rng)

                stem = f"{subject}_r{r}"
                write_wav(out_dir / f"{stem}.wav", x, sr)
                save_timestamps([WordTimestamp(w, a, b) for w, (a, b) in zip(text, spans)], out_dir / f"{stem}.json")
                entries.append(ManifestEntry(f"{stem}.wav", subject, label, Kind.TEXT, f"{stem}.json"))
                truth[f"{stem}.wav"] = bursts

    manifest = DatasetManifest(entries, working_rate=sr, root=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    (out_dir / "ground_truth.json").write_text(
        json.dumps({"burst_words": list(burst_words), "text": list(text),
                    "burst_chunks": truth, "config": asdict(cfg)}, indent=1) + "\n",
        encoding="utf-8",
    )
    return SynthCorpus(manifest, manifest_path, truth, burst_words, text)
