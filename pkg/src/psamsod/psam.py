"""Pyramid self-attention: pool to three scales, attend, upsample, concat, fuse."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, local_self_attention
from .autodiff import ShapeError, Tensor, concat, tensor
from .nn import ConvParams, avg_pool, conv2d, upsample_bilinear

__all__ = ["PsamConfig", "PsamOutput", "init_psam", "psam_forward", "psam_branch"]

DEFAULT_SCALES = (2, 4, 8)


@dataclass
class PsamConfig:
    branches: list[AttentionParams]
    fuse: ConvParams  # 1x1, 4C -> C
    scales: tuple[int, ...] = DEFAULT_SCALES

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if len(self.scales) != 3 or len(self.branches) != 3:
            raise ValueError(f"exactly three pyramid scales are required, got {self.scales}")
        if any(s < 1 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        c = self.branches[0].channels
        if any(b.channels != c for b in self.branches):
            raise ShapeError("all pyramid branches must share the channel count")
        if self.fuse.weight.shape[:2] != (c, 4 * c) or self.fuse.weight.shape[2:] != (1, 1):
            raise ShapeError(f"fuse must be a 1x1 conv {4 * c} -> {c}, got {self.fuse.weight.shape}")

    @property
    def channels(self) -> int:
        return self.branches[0].channels

    def parameters(self) -> list[Tensor]:
        params = [t for b in self.branches for t in b.parameters()]
        return params + self.fuse.parameters()


@dataclass
class PsamOutput:
    fused: Tensor  # [N, C, H, W]
    pre_fuse: Tensor  # [N, 4C, H, W]
    branches: list[Tensor] = field(default_factory=list)


def init_psam(channels: int, rng: np.random.Generator, scales=DEFAULT_SCALES, window_k: int = 3) -> PsamConfig:
    bound = np.sqrt(1.0 / channels)
    branches = [
        AttentionParams(
            *(Tensor(rng.uniform(-bound, bound, (channels, channels)), requires_grad=True) for _ in range(3)),
            window_k=window_k,
        )
        for _ in range(3)
    ]
    fb = np.sqrt(1.0 / (4 * channels))
    fuse = ConvParams(
        Tensor(rng.uniform(-fb, fb, (channels, 4 * channels, 1, 1)), requires_grad=True),
        Tensor(np.zeros(channels), requires_grad=True),
    )
    return PsamConfig(branches, fuse, scales)


def psam_branch(x_in: Tensor, params: AttentionParams, factor: int) -> Tensor:
    h, w = x_in.shape[2:]
    pooled = avg_pool(x_in, factor) if factor > 1 else x_in
    return upsample_bilinear(local_self_attention(pooled, params), h, w)


def psam_forward(x_in: Tensor, cfg: PsamConfig) -> PsamOutput:
    x_in = tensor(x_in)
    if x_in.ndim != 4 or x_in.shape[1] != cfg.channels:
        raise ShapeError(f"psam expects [N, {cfg.channels}, H, W], got {x_in.shape}")
    h, w = x_in.shape[2:]
    top = max(cfg.scales)
    if h % top or w % top:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by largest scale {top}")
    ys = [psam_branch(x_in, p, f) for p, f in zip(cfg.branches, cfg.scales)]
    pre_fuse = concat(ys + [x_in], axis=1)
    return PsamOutput(conv2d(pre_fuse, cfg.fuse), pre_fuse, ys)
