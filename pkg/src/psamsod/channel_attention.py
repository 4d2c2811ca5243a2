"""Squeeze-and-excitation reweighting of feature channels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, register_op, relu, sigmoid, tensor
from .nn import linear

__all__ = ["SEParams", "init_se", "squeeze", "excite", "rescale", "channel_attention"]


@dataclass
class SEParams:
    w1: Tensor  # [C, C/r]
    w2: Tensor  # [C/r, C]
    b1: Tensor | None = None
    b2: Tensor | None = None
    reduction_r: int = 4

    def __post_init__(self):
        c, hidden = self.w1.shape
        if hidden < 1:
            raise ValueError("bottleneck width must be at least 1")
        if self.w2.shape != (hidden, c):
            raise ShapeError(f"w2 must be [{hidden}, {c}], got {self.w2.shape}")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [t for t in (self.w1, self.b1, self.w2, self.b2) if t is not None]


def init_se(channels: int, reduction_r: int, rng: np.random.Generator) -> SEParams:
    if reduction_r < 1 or channels % reduction_r:
        raise ValueError(f"reduction {reduction_r} must divide channel count {channels}")
    hidden = channels // reduction_r
    b1, b2 = np.sqrt(1.0 / channels), np.sqrt(1.0 / hidden)
    return SEParams(
        w1=Tensor(rng.uniform(-b1, b1, (channels, hidden)), requires_grad=True),
        w2=Tensor(rng.uniform(-b2, b2, (hidden, channels)), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        b2=Tensor(np.zeros(channels), requires_grad=True),
        reduction_r=reduction_r,
    )


def squeeze(x: Tensor) -> Tensor:
    """Global average pool: [N, C, H, W] -> [N, C]."""
    x = tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"squeeze expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3))


def excite(p: Tensor, w: SEParams) -> Tensor:
    p = tensor(p)
    if p.ndim != 2 or p.shape[1] != w.channels:
        raise ShapeError(f"excite: descriptor {p.shape} does not match {w.channels} channels")
    return sigmoid(linear(relu(linear(p, w.w1, w.b1)), w.w2, w.b2))


def rescale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every channel map x[n, c] by the scalar s[n, c]."""
    x, s = tensor(x), tensor(s)
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"rescale: weights {s.shape} do not match feature map {x.shape}")
    sb = s.data[:, :, None, None]

    def bw(g):
        return g * sb, (g * x.data).sum(axis=(2, 3))

    return Tensor._from_op(x.data * sb, (x, s), bw, "rescale")


register_op("rescale")


def channel_attention(x: Tensor, w: SEParams) -> Tensor:
    return rescale(x, excite(squeeze(x), w))
