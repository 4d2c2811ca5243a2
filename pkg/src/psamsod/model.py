"""FPN saliency network with optional pyramid self-attention and lateral
channel attention, plus a versioned binary checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, relu, sigmoid, tensor, ShapeError
from .channel_attention import SEParams, channel_attention, init_se
from .nn import ConvParams, conv2d, max_pool, upsample_bilinear
from .psam import PsamConfig, init_psam, psam_forward

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "Model",
    "build_model",
    "forward",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "VersionMismatchError",
    "TruncatedCheckpointError",
    "ConfigIncompatibleError",
]

VARIANTS = ("baseline", "baseline_sa", "full")
STRIDES = (4, 8, 16, 32)


def normalize_variant(name: str) -> str:
    v = name.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from baseline, baseline-sa, full")
    return v


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    fpn_channels: int = 32
    psam_scales: tuple[int, ...] = (1, 1, 2)
    window_k: int = 3
    se_reduction: int = 4
    variant: str = "full"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.backbone_channels = tuple(int(v) for v in self.backbone_channels)
        self.psam_scales = tuple(int(v) for v in self.psam_scales)
        self.variant = normalize_variant(self.variant)
        self.validate()

    def validate(self) -> None:
        if len(self.backbone_channels) != len(STRIDES):
            raise ValueError(f"need {len(STRIDES)} backbone stages, got {len(self.backbone_channels)}")
        if len(self.psam_scales) != 3:
            raise ValueError("psam_scales must list exactly three factors")
        unit = STRIDES[-1] * max(self.psam_scales)
        h, w = self.input_size
        if h % unit or w % unit or h <= 0 or w <= 0:
            raise ValueError(f"input size {h}x{w} must be a positive multiple of {unit}")
        if self.window_k < 1 or self.window_k % 2 == 0:
            raise ValueError("window_k must be odd")
        if self.se_reduction < 1 or self.fpn_channels % self.se_reduction:
            raise ValueError(f"se_reduction {self.se_reduction} must divide fpn_channels {self.fpn_channels}")

    @property
    def use_psam(self) -> bool:
        return self.variant in ("baseline_sa", "full")

    @property
    def use_ca(self) -> bool:
        return self.variant == "full"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    backbone: list[list[ConvParams]]
    laterals: list[ConvParams]
    smooth: list[ConvParams]
    head: ConvParams
    se: list[SEParams] = field(default_factory=list)
    psam: PsamConfig | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []

        def conv(prefix, p):
            out.append((f"{prefix}.weight", p.weight))
            if p.bias is not None:
                out.append((f"{prefix}.bias", p.bias))

        for si, stage in enumerate(self.backbone):
            for li, p in enumerate(stage):
                conv(f"backbone.{si}.{li}", p)
        for i, p in enumerate(self.laterals):
            conv(f"lateral.{i}", p)
        for i, p in enumerate(self.smooth):
            conv(f"smooth.{i}", p)
        conv("head", self.head)
        for i, s in enumerate(self.se):
            for name in ("w1", "b1", "w2", "b2"):
                if getattr(s, name) is not None:
                    out.append((f"se.{i}.{name}", getattr(s, name)))
        if self.psam is not None:
            for i, b in enumerate(self.psam.branches):
                for name in ("w_q", "w_k", "w_v"):
                    out.append((f"psam.branch.{i}.{name}", getattr(b, name)))
            conv("psam.fuse", self.psam.fuse)
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def __call__(self, images) -> Tensor:
        return forward(self, images)


def _conv(rng, cin, cout, k=3, stride=1, gain=3.0) -> ConvParams:
    fan_in = cin * k * k
    bound = np.sqrt(gain / fan_in)
    return ConvParams(
        Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True),
        Tensor(np.zeros(cout), requires_grad=True),
        stride=stride,
        padding=k // 2,
    )


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Initialise a model deterministically from ``seed``.

    Backbone, FPN and head draw from one stream, PSAM and SE from their own,
    so the variants share identical values for their common parameters.
    """
    cfg.validate()
    core_ss, psam_ss, se_ss = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(core_ss)
    chans = cfg.backbone_channels
    backbone = []
    cin = 3
    for si, c in enumerate(chans):
        # relu follows every backbone conv: He-uniform bound
        stage = [_conv(rng, cin, c, gain=6.0), _conv(rng, c, c, gain=6.0)]
        if si == 0:
            stage.append(_conv(rng, c, c, gain=6.0))
        backbone.append(stage)
        cin = c
    f = cfg.fpn_channels
    laterals = [_conv(rng, c, f, k=1) for c in chans]
    smooth = [_conv(rng, f, f) for _ in chans[:-1]]
    head = _conv(rng, f, 1)

    se = []
    if cfg.use_ca:
        se_rng = np.random.default_rng(se_ss)
        # one block per merged lateral (C2..C4); C5's lateral feeds PSAM or P5 directly
        se = [init_se(f, cfg.se_reduction, se_rng) for _ in chans[:-1]]
    psam = None
    if cfg.use_psam:
        psam = init_psam(f, np.random.default_rng(psam_ss), cfg.psam_scales, cfg.window_k)
    return Model(cfg, backbone, laterals, smooth, head, se, psam)


def backbone_features(model: Model, x: Tensor) -> list[Tensor]:
    """Bottom-up pass; returns the stride-4/8/16/32 maps.

    The first stage opens with a full-resolution stem conv and a 2x2 max pool;
    every stage then halves resolution with a 2x2 max pool between its first
    and second 3x3 conv.
    """
    feats = []
    h = x
    for si, stage in enumerate(model.backbone):
        if si == 0:
            h = max_pool(relu(conv2d(h, stage[0])), 2)
            stage = stage[1:]
        h = relu(conv2d(h, stage[0]))
        h = max_pool(h, 2)
        for p in stage[1:]:
            h = relu(conv2d(h, p))
        feats.append(h)
    return feats


def forward(model: Model, images) -> Tensor:
    """Logits [N, 1, H, W] for images [N, 3, H, W]."""
    x = tensor(images)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != cfg.input_size:
        raise ShapeError(f"expected images [N, 3, {cfg.input_size[0]}, {cfg.input_size[1]}], got {x.shape}")
    feats = backbone_features(model, x)
    lats = [conv2d(c, p) for c, p in zip(feats, model.laterals)]
    if cfg.use_ca:
        lats = [channel_attention(l, s) for l, s in zip(lats[:-1], model.se)] + lats[-1:]

    g = psam_forward(lats[-1], model.psam).fused if cfg.use_psam else None
    p = g if g is not None else lats[-1]
    for level, smooth in zip(range(len(lats) - 2, -1, -1), model.smooth):
        hh, ww = lats[level].shape[2:]
        merged = add(lats[level], upsample_bilinear(p, hh, ww))
        if g is not None:
            merged = add(merged, upsample_bilinear(g, hh, ww))
        p = conv2d(merged, smooth)
    return upsample_bilinear(conv2d(p, model.head), *cfg.input_size)


def predict(model: Model, images) -> Tensor:
    """Saliency probabilities in (0, 1), same shape as the logits."""
    return sigmoid(Tensor(forward(model, images).data))


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"PSAMSOD\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigIncompatibleError(CheckpointError):
    pass


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize: magic, u32 version, u32 + JSON config, u32 tensor count, then
    per tensor u16 + name, u8 ndim, u32 dims, little-endian float64 data."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    named = model.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.data.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    """Read a checkpoint. If ``config`` is given the stored config must equal it."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise VersionMismatchError(f"not a checkpoint: bad magic {magic!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    stored = ModelConfig.from_dict(json.loads(r.take(n).decode()))
    if config is not None and config != stored:
        raise ConfigIncompatibleError(
            f"checkpoint config (variant={stored.variant}) incompatible with requested (variant={config.variant})")
    model = build_model(stored, seed=0)
    expected = model.named_parameters()
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise ConfigIncompatibleError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
    for name, t in expected:
        (ln,) = r.unpack("<H")
        got = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if got != name or tuple(shape) != t.shape:
            raise ConfigIncompatibleError(f"tensor {got}{tuple(shape)} where {name}{t.shape} was expected")
        t.data = np.frombuffer(r.take(8 * t.size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last tensor")
    return model
