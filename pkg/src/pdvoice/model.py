"""Two-block 1D CNN over raw waveform chunks, plus its binary file format.

conv(1->48, k3, p1) -> BN -> ReLU -> conv(48->96, k3, p1) -> BN -> ReLU
-> flatten -> fully connected -> 2 logits (index 0 = HC, 1 = PD).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import BnParams, Tape, Tensor, affine, batchnorm, conv1d, flatten, relu
from .errors import ChunkTooShort, CorruptFile, ShapeMismatch, VersionMismatch

CHANNELS = (48, 96)
KERNEL = 3
PADDING = 1
N_CLASSES = 2

MAGIC = b"PDN1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIqQI")  # magic, version, chunk_len, seed, n_floats, meta_len


@dataclass
class PdNet:
    chunk_len: int
    conv1_w: Tensor
    conv1_b: Tensor
    bn1: BnParams
    conv2_w: Tensor
    conv2_b: Tensor
    bn2: BnParams
    fc_w: Tensor
    fc_b: Tensor
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def channels(self) -> tuple[int, int]:
        return self.conv1_w.shape[0], self.conv2_w.shape[0]

    def parameters(self) -> list[Tensor]:
        """Learnable tensors in a fixed order."""
        return [
            self.conv1_w, self.conv1_b, self.bn1.gamma, self.bn1.beta,
            self.conv2_w, self.conv2_b, self.bn2.gamma, self.bn2.beta,
            self.fc_w, self.fc_b,
        ]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        """Every stored array (learnable and running stats) in file order."""
        return [
            self.conv1_w.values, self.conv1_b.values,
            self.bn1.gamma.values, self.bn1.beta.values, self.bn1.running_mean, self.bn1.running_var,
            self.conv2_w.values, self.conv2_b.values,
            self.bn2.gamma.values, self.bn2.beta.values, self.bn2.running_mean, self.bn2.running_var,
            self.fc_w.values, self.fc_b.values,
        ]

    def copy_state(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        (self.conv1_w.values, self.conv1_b.values,
         self.bn1.gamma.values, self.bn1.beta.values, self.bn1.running_mean, self.bn1.running_var,
         self.conv2_w.values, self.conv2_b.values,
         self.bn2.gamma.values, self.bn2.beta.values, self.bn2.running_mean, self.bn2.running_var,
         self.fc_w.values, self.fc_b.values) = [a.copy() for a in arrays]
        self.zero_grad()


def param_count(chunk_len: int, channels=CHANNELS) -> int:
    """Number of float64 values serialized for a net (running stats included)."""
    c1, c2 = channels
    return (
        c1 * 1 * KERNEL + c1 + 2 * c1 * 2
        + c2 * c1 * KERNEL + c2 + 2 * c2 * 2
        + N_CLASSES * c2 * chunk_len + N_CLASSES
    )


def init(chunk_len: int, seed: int = 0, channels=CHANNELS) -> PdNet:
    """Fan-in uniform init, zero biases, identity BN."""
    if chunk_len < KERNEL:
        raise ChunkTooShort(f"chunk_len {chunk_len} < kernel size {KERNEL}")
    c1, c2 = channels
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        s = np.sqrt(1.0 / fan_in)
        return rng.uniform(-s, s, size=shape)

    return PdNet(
        chunk_len=chunk_len,
        conv1_w=Tensor(uniform((c1, 1, KERNEL), KERNEL), "conv1_w"),
        conv1_b=Tensor(np.zeros(c1), "conv1_b"),
        bn1=BnParams.create(c1),
        conv2_w=Tensor(uniform((c2, c1, KERNEL), c1 * KERNEL), "conv2_w"),
        conv2_b=Tensor(np.zeros(c2), "conv2_b"),
        bn2=BnParams.create(c2),
        fc_w=Tensor(uniform((N_CLASSES, c2 * chunk_len), c2 * chunk_len), "fc_w"),
        fc_b=Tensor(np.zeros(N_CLASSES), "fc_b"),
        seed=seed,
    )


@dataclass
class ForwardResult:
    logits: Tensor
    tape: Tape
    activations: Tensor  # last conv block output A^L, (N, C2, T)
    hidden: Tensor  # first conv block output, (N, C1, T)


def as_batch(x, chunk_len: int) -> np.ndarray:
    """Coerce chunk samples to an ``(N, 1, T)`` array, checking the length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3 or arr.shape[1] != 1 or arr.shape[2] != chunk_len:
        raise ShapeMismatch(f"expected chunks of length {chunk_len}, got array {arr.shape}")
    return arr


def forward(net: PdNet, x, train: bool = False) -> ForwardResult:
    tape = Tape()
    inp = Tensor(as_batch(x, net.chunk_len), "input")
    h = relu(tape, batchnorm(tape, conv1d(tape, inp, net.conv1_w, net.conv1_b, PADDING), net.bn1, train))
    a = relu(tape, batchnorm(tape, conv1d(tape, h, net.conv2_w, net.conv2_b, PADDING), net.bn2, train))
    logits = affine(tape, flatten(tape, a), net.fc_w, net.fc_b)
    return ForwardResult(logits, tape, a, h)


def predict_logits(net: PdNet, x, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits without keeping tapes around."""
    arr = as_batch(x, net.chunk_len)
    out = [forward(net, arr[i : i + batch_size]).logits.values for i in range(0, len(arr), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def save(net: PdNet, path) -> None:
    blob = np.concatenate([a.ravel() for a in net.state_arrays()]).astype("<f8").tobytes()
    meta = dict(net.meta)
    meta.update(channels=list(net.channels), kernel=KERNEL, padding=PADDING,
                momentum=net.bn1.momentum, epsilon=net.bn1.epsilon, tool_version=__version__)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    n_floats = len(blob) // 8
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, net.chunk_len, net.seed, n_floats, len(meta_bytes))
    body += meta_bytes + blob
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load(path) -> PdNet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise CorruptFile(f"{path}: file too short")
    magic, version, chunk_len, seed, n_floats, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected_size = _HEADER.size + meta_len + 8 * n_floats + 4
    if len(data) != expected_size:
        raise CorruptFile(f"{path}: size {len(data)} != {expected_size}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    try:
        meta = json.loads(data[_HEADER.size : _HEADER.size + meta_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: bad metadata") from exc

    channels = tuple(meta.get("channels", CHANNELS))
    if n_floats != param_count(chunk_len, channels):
        raise CorruptFile(f"{path}: {n_floats} floats for chunk_len {chunk_len}")
    net = init(chunk_len, seed, channels)
    net.bn1.momentum = net.bn2.momentum = meta.get("momentum", 0.1)
    net.bn1.epsilon = net.bn2.epsilon = meta.get("epsilon", 1e-5)
    flat = np.frombuffer(data, dtype="<f8", count=n_floats, offset=_HEADER.size + meta_len)
    arrays, pos = [], 0
    for a in net.state_arrays():
        arrays.append(flat[pos : pos + a.size].reshape(a.shape).astype(np.float64))
        pos += a.size
    net.load_state(arrays)
    net.meta = {k: v for k, v in meta.items()
                if k not in ("channels", "kernel", "padding", "momentum", "epsilon", "tool_version")}
    return net
