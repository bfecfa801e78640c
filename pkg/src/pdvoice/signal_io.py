"""WAV and manifest I/O.

Recordings are canonicalized to mono float64 in [-1, 1]. Only RIFF/WAVE
with PCM16 or IEEE float32 samples and one or two channels is accepted;
files are always written back as mono PCM16.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    EmptyAudio,
    MalformedRiff,
    ManifestError,
    MissingFile,
    UnsupportedEncoding,
)

DEFAULT_WORKING_RATE = 16000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class Label(str, Enum):
    HC = "HC"
    PD = "PD"

    @property
    def index(self) -> int:
        """Class index used by the network; PD is the positive class."""
        return 1 if self is Label.PD else 0


class Kind(str, Enum):
    VOWEL = "vowel"
    SYLLABLE = "syllable"
    TEXT = "text"


@dataclass(frozen=True)
class AudioRecording:
    samples: np.ndarray
    sample_rate: int
    subject_id: str = ""
    label: Label = Label.HC
    kind: Kind = Kind.TEXT
    source_path: str = ""

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def recording_id(self) -> str:
        return self.source_path or self.subject_id


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject: str
    label: Label
    kind: Kind = Kind.TEXT
    timestamps: str | None = None

    def to_json(self) -> dict:
        out = {
            "path": self.path,
            "subject": self.subject,
            "label": self.label.value,
            "kind": self.kind.value,
        }
        if self.timestamps is not None:
            out["timestamps"] = self.timestamps
        return out


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    working_rate: int = DEFAULT_WORKING_RATE
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not e.subject:
                raise ManifestError(f"entry {e.path!r} has an empty subject")
            if e.path in seen:
                raise ManifestError(f"duplicate path {e.path!r}")
            seen.add(e.path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subjects(self) -> dict[str, Label]:
        out: dict[str, Label] = {}
        for e in self.entries:
            prev = out.setdefault(e.subject, e.label)
            if prev is not e.label:
                raise ManifestError(f"subject {e.subject!r} carries both labels")
        return out


def _parse_entry(obj: dict) -> ManifestEntry:
    try:
        return ManifestEntry(
            path=str(obj["path"]),
            subject=str(obj["subject"]),
            label=Label(obj["label"]),
            kind=Kind(obj.get("kind", "text")),
            timestamps=obj.get("timestamps"),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestError(f"bad manifest entry {obj!r}: {exc}") from exc


def load_manifest(path, working_rate: int = DEFAULT_WORKING_RATE) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if isinstance(doc, dict):
        working_rate = int(doc.get("working_rate", working_rate))
        doc = doc.get("entries")
    if not isinstance(doc, list):
        raise ManifestError(f"{path}: expected an array of entries")
    return DatasetManifest(
        [_parse_entry(o) for o in doc], working_rate=working_rate, root=path.parent
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = [e.to_json() for e in manifest.entries]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise MalformedRiff(f"chunk {cid!r} claims {size} bytes past end of file")
        yield cid, data[body : body + size]
        pos = body + size + (size & 1)


def read_wav(path, entry: ManifestEntry | None = None) -> AudioRecording:
    """Load a WAV file as a mono float recording.

    Metadata (subject, label, kind) comes from ``entry``; the file only
    contributes samples and the sample rate.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedRiff(f"{path}: not a RIFF/WAVE file")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 > len(data):
        raise MalformedRiff(f"{path}: RIFF size {riff_size} exceeds file size")

    fmt = payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None or len(fmt) < 16:
        raise MalformedRiff(f"{path}: missing fmt or data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {channels} channels")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag:#x}, {bits} bits")
    if rate <= 0:
        raise MalformedRiff(f"{path}: sample rate {rate}")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise EmptyAudio(str(path))
    raw = np.frombuffer(payload[: n_frames * frame_bytes], dtype=dtype)
    samples = raw.astype(np.float64).reshape(n_frames, channels).mean(axis=1) * scale
    samples = np.clip(samples, -1.0, 1.0)

    meta = {}
    if entry is not None:
        meta = dict(subject_id=entry.subject, label=entry.label, kind=entry.kind)
    return AudioRecording(samples, int(rate), source_path=str(path), **meta)


def write_wav(path, samples, sample_rate: int) -> None:
    """Write mono PCM16."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    Path(path).write_bytes(header + pcm)


def resample(rec: AudioRecording, target_rate: int) -> AudioRecording:
    """Linear-interpolation resampling to ``target_rate``.

    Output length is ``round(n * target / source)``; output sample i sits at
    source time ``i / target_rate`` and positions past the last input sample
    hold its value.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    n = len(rec.samples)
    if n == 0:
        raise EmptyAudio(rec.source_path)
    if target_rate == rec.sample_rate:
        return rec
    n_out = max(1, int(np.floor(n * target_rate / rec.sample_rate + 0.5)))
    pos = np.arange(n_out) * (rec.sample_rate / target_rate)
    out = np.interp(pos, np.arange(n), rec.samples)
    return replace(rec, samples=out, sample_rate=int(target_rate))


def load_recording(manifest: DatasetManifest, entry: ManifestEntry) -> AudioRecording:
    rec = read_wav(manifest.resolve(entry.path), entry)
    rec = replace(rec, source_path=entry.path)
    return resample(rec, manifest.working_rate)
