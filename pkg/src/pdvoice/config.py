"""Run configuration: one document holding every tunable, plus its hash."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .errors import ConfigError, InvalidConfig, MissingFile
from .segmentation import DEFAULT_CHUNK_LEN, EnvelopeParams
from .synthgen import SynthConfig
from .training import Hyper

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SegmentConfig:
    strategy: str = "hybrid"
    window_s: float = 0.025
    hop_s: float = 0.010
    rel_threshold: float = 0.1
    min_silence_s: float = 0.15
    words_per_chunk: int = 1
    snap_tolerance_s: float = 0.05
    chunk_len: int = DEFAULT_CHUNK_LEN

    def envelope(self) -> EnvelopeParams:
        return EnvelopeParams(self.window_s, self.hop_s, self.rel_threshold, self.min_silence_s)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 16
    early_stop_patience: int = 5
    val_frac: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    iterations: int = 9
    test_frac: float = 0.2
    knn_k: int = 5


@dataclass(frozen=True)
class ExplainConfig:
    percentile: float = 90.0
    top_n: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    working_rate: int = 16000
    synth: SynthConfig = field(default_factory=SynthConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def __post_init__(self):
        if self.segment.strategy not in ("silence", "words", "hybrid"):
            raise InvalidConfig(f"unknown segmentation strategy {self.segment.strategy!r}")
        if self.segment.chunk_len < 3:
            raise InvalidConfig("chunk_len must be at least 3")
        if self.segment.words_per_chunk < 1:
            raise InvalidConfig("words_per_chunk must be positive")
        if self.evaluate.iterations < 1 or not 0 < self.evaluate.test_frac < 1:
            raise InvalidConfig("iterations must be >= 1 and test_frac in (0, 1)")
        if self.evaluate.knn_k % 2 == 0:
            raise InvalidConfig("knn_k must be odd")
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.lr < 0:
            raise InvalidConfig("bad training hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def hyper(self, seed: int) -> Hyper:
        t = self.train
        return Hyper(t.lr, t.epochs, t.batch_size, t.early_stop_patience, t.val_frac, seed)


def _build(cls, data):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{cls.__name__} expects a table, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidConfig(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        kwargs[name] = _build(type(default), value) if is_dataclass(default) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    data = cfg.to_dict()
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfig(f"override {item!r} is not key=value")
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise InvalidConfig(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise InvalidConfig(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value.strip())
    return from_dict(data)


def load_config(path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"missing config {path}")
        text = path.read_text(encoding="utf-8")
        try:
            data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return apply_overrides(from_dict(data), overrides)


def with_synth(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, synth=replace(cfg.synth, **changes))
