"""A small tape-based reverse-mode differentiation engine.

Only the operators the network needs are provided. Activations carry a
leading batch axis: conv/BN/ReLU work on ``(N, C, T)`` arrays, the affine
layer on ``(N, F)``. Everything runs in float64.

Passing ``tape=None`` to an op runs it without recording (pure inference).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyBatch, SeedShapeMismatch, ShapeMismatch, TapeCorrupted

DEBUG = os.environ.get("PDVOICE_DEBUG", "") not in ("", "0")


class Tensor:
    """Array of values with a same-shape gradient buffer."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor({self.name or '?'}, shape={self.shape})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the upstream gradient to one gradient (or None) per input
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)

    def record(self, op, inputs, output, backward_fn) -> Tensor:
        if DEBUG and not np.all(np.isfinite(output.values)):
            raise FloatingPointError(f"non-finite output from {op}")
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward_fn))
        return output

    def backward(self, output: Tensor, seed_grad=None) -> None:
        """Reverse sweep from ``output``, accumulating into every reachable ``.grad``.

        Upstream gradients are summed in a local table during the sweep and
        added to the buffers once at the end, so repeated calls accumulate
        linearly.
        """
        if not any(node.output is output for node in self.nodes):
            raise TapeCorrupted(f"{output!r} was not produced on this tape")
        seed = np.ones_like(output.values) if seed_grad is None else np.asarray(seed_grad, dtype=np.float64)
        if seed.shape != output.shape:
            raise SeedShapeMismatch(f"seed {seed.shape} vs output {output.shape}")

        upstream: dict[int, np.ndarray] = {id(output): seed}
        touched: dict[int, Tensor] = {id(output): output}
        for node in reversed(self.nodes):
            g = upstream.get(id(node.output))
            if g is None:
                continue
            grads = node.backward_fn(g)
            if len(grads) != len(node.inputs):
                raise TapeCorrupted(f"{node.op} returned {len(grads)} grads for {len(node.inputs)} inputs")
            for t, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if gi.shape != t.shape:
                    raise TapeCorrupted(f"{node.op}: grad shape {gi.shape} != input {t.shape}")
                key = id(t)
                if key in upstream:
                    upstream[key] = upstream[key] + gi
                else:
                    upstream[key] = gi
                    touched[key] = t
        for key, t in touched.items():
            t.grad += upstream[key]


def _emit(tape, op, inputs, out_values, backward_fn) -> Tensor:
    out = Tensor(out_values, name=op)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def conv1d(tape: Tape | None, x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation with zero padding; ``x`` is ``(N, C_in, T)``."""
    if x.values.ndim != 3:
        raise ShapeMismatch(f"conv1d expects (N, C, T), got {x.shape}")
    n, c_in, t = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ShapeMismatch(f"conv1d weight expects {w_in} input channels, got {c_in}")
    t_out = t + 2 * padding - k + 1
    if t < 1 or t_out < 1:
        raise ShapeMismatch(f"time length {t} too short for kernel {k}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding))) if padding else x.values
    cols = sliding_window_view(xp, k, axis=2)  # (N, C_in, T_out, K)
    cols = cols.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    wmat = weight.values.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).reshape(n, t_out, c_out).transpose(0, 2, 1)
    out = out + bias.values[None, :, None]

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * t_out, c_out)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g.sum(axis=(0, 2))
        dcols = (g2 @ wmat).reshape(n, t_out, c_in, k)
        dxp = np.zeros((n, c_in, t + 2 * padding))
        for j in range(k):
            dxp[:, :, j : j + t_out] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, padding : padding + t] if padding else dxp
        return dx, dw, db

    return _emit(tape, "conv1d", (x, weight, bias), np.ascontiguousarray(out), backward)


@dataclass
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BnParams":
        return cls(
            gamma=Tensor(np.ones(channels), "gamma"),
            beta=Tensor(np.zeros(channels), "beta"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(tape: Tape | None, x: Tensor, p: BnParams, train: bool) -> Tensor:
    """Per-channel normalization over batch and time.

    Train mode uses batch statistics and updates the running averages
    (unbiased variance); eval mode is a fixed per-channel affine map.
    """
    if x.values.ndim != 3:
        raise ShapeMismatch(f"batchnorm expects (N, C, T), got {x.shape}")
    n, c, t = x.shape
    if n == 0:
        raise EmptyBatch("batchnorm on an empty batch")
    if c != p.gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm has {p.gamma.shape[0]} channels, input has {c}")
    gamma = p.gamma.values[None, :, None]

    if train:
        mean = x.values.mean(axis=(0, 2))
        var = x.values.var(axis=(0, 2))
        m = n * t
        unbiased = var * m / (m - 1) if m > 1 else var
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x.values - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma * xhat + p.beta.values[None, :, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma
        if train:
            dx = inv_std[None, :, None] * (
                dxhat
                - dxhat.mean(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
            )
        else:
            dx = dxhat * inv_std[None, :, None]
        return dx, dgamma, dbeta

    return _emit(tape, "batchnorm", (x, p.gamma, p.beta), out, backward)


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    mask = x.values > 0
    return _emit(tape, "relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def flatten(tape: Tape | None, x: Tensor) -> Tensor:
    shape = x.shape
    out = x.values.reshape(shape[0], -1)
    return _emit(tape, "flatten", (x,), out, lambda g: (g.reshape(shape),))


def affine(tape: Tape | None, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``y = x W^T + b`` for ``x`` of shape ``(N, F)`` and ``W`` of shape ``(out, F)``."""
    if x.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"affine: input {x.shape} vs weight {weight.shape}")
    out = x.values @ weight.values.T + bias.values

    def backward(g):
        return g @ weight.values, g.T @ x.values, g.sum(axis=0)

    return _emit(tape, "affine", (x, weight, bias), out, backward)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(tape: Tape | None, logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean softmax cross-entropy; returns ``(scalar loss tensor, probs)``.

    ``logits`` may be a single ``(classes,)`` vector or an ``(N, classes)`` batch.
    """
    z = logits.values
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if len(y) != z2.shape[0]:
        raise ShapeMismatch(f"{len(y)} targets for {z2.shape[0]} logit rows")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    probs = np.exp(log_probs)
    rows = np.arange(len(y))
    loss = -log_probs[rows, y].mean()

    def backward(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        d *= g / len(y)
        return (d[0] if single else d,)

    out = _emit(tape, "softmax_xent", (logits,), np.asarray(loss), backward)
    return out, (probs[0] if single else probs)
