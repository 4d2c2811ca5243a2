"""Image/mask I/O in binary Netpbm, synthetic shape datasets, flip augmentation."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import resize_bilinear

__all__ = [
    "DataError",
    "read_netpbm",
    "write_ppm",
    "write_pgm",
    "write_saliency_pgm",
    "Sample",
    "load_dataset",
    "SyntheticSpec",
    "render_sample",
    "generate_synthetic",
    "augment_flip",
    "stack_batch",
]


class DataError(ValueError):
    """Unreadable, missing or inconsistent dataset files."""


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_netpbm(path) -> np.ndarray:
    """Read a P5 (grey) or P6 (RGB) file with maxval 255.

    Returns uint8 [H, W] for P5 and [H, W, 3] for P6.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(v) for v in fields[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte ends the header
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    body = raw[pos:pos + n]
    if len(body) != n:
        raise DataError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def _write(path, magic: bytes, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = arr.shape[:2]
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    return path


def _to_u8(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> Path:
    """``image`` is [H, W, 3] uint8 or floats in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3], got {image.shape}")
    return _write(path, b"P6", _to_u8(image))


def write_pgm(path, image) -> Path:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs [H, W], got {image.shape}")
    return _write(path, b"P5", _to_u8(image))


def write_saliency_pgm(path, prob: np.ndarray) -> Path:
    """Probability map written as round(p * 255)."""
    prob = np.asarray(prob, dtype=np.float64)
    return write_pgm(path, np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8))


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray  # [1, H, W] in {0, 1}
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"sample {self.id!r}: image must be [3, H, W], got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise DataError(f"sample {self.id!r}: mask {self.mask.shape} does not match image {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"sample {self.id!r}: image values outside [0, 1]")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"sample {self.id!r}: mask is not binary")


def load_dataset(image_dir, mask_dir) -> list[Sample]:
    """Pair every ``<stem>.ppm`` in ``image_dir`` with ``<stem>.pgm`` in ``mask_dir``."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    samples = []
    for img_path in sorted(image_dir.glob("*.ppm")):
        mask_path = mask_dir / (img_path.stem + ".pgm")
        if not mask_path.exists():
            raise DataError(f"no mask for image {img_path.name} (expected {mask_path})")
        img = read_netpbm(img_path)
        mask = read_netpbm(mask_path)
        if img.ndim != 3:
            raise DataError(f"{img_path}: expected a colour P6 image")
        if mask.ndim != 2:
            raise DataError(f"{mask_path}: expected a grey P5 mask")
        if mask.shape != img.shape[:2]:
            raise DataError(f"{img_path.name}: image {img.shape[:2]} and mask {mask.shape} sizes differ")
        samples.append(Sample(
            image=img.transpose(2, 0, 1) / 255.0,
            mask=(mask[None] / 255.0 >= 0.5).astype(np.float64),
            id=img_path.stem,
        ))
    return samples


# -- synthetic data ---------------------------------------------------------------

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


@dataclass
class SyntheticSpec:
    n_samples: int = 200
    size: tuple[int, int] = (64, 64)
    shapes_per_image: tuple[int, int] = (1, 2)  # inclusive range
    kinds: tuple[str, ...] = SHAPE_KINDS
    noise_amplitude: float = 0.08
    noise_smoothing: int = 4
    min_coverage: float = 0.05
    max_coverage: float = 0.60
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        self.kinds = tuple(self.kinds)
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if min(self.size) < 8:
            raise ValueError(f"image size {self.size} too small")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        if not set(self.kinds) <= set(SHAPE_KINDS) or not self.kinds:
            raise ValueError(f"shape kinds must be drawn from {SHAPE_KINDS}")
        if not 0 <= self.min_coverage < self.max_coverage <= 1:
            raise ValueError("coverage band must satisfy 0 <= min < max <= 1")


def _background(rng: np.random.Generator, h: int, w: int, spec: SyntheticSpec) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    s = max(spec.noise_smoothing, 1)
    coarse = rng.standard_normal((3, h // s + 2, w // s + 2))
    tex = resize_bilinear(coarse, h + 2 * s, w + 2 * s)[:, s:s + h, s:s + w]
    tex = tex / (np.abs(tex).max() + 1e-12)
    fine = rng.standard_normal((3, h, w)) * 0.3
    return base[:, None, None] + spec.noise_amplitude * (tex + fine) / 1.3


def _shape_mask(rng: np.random.Generator, kind: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    if kind == "ellipse":
        ry, rx = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        hh, hw = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    # triangle: three vertices around the centre, inside-test by edge signs
    r = rng.uniform(0.15, 0.35) * min(h, w)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3 + rng.uniform(-0.4, 0.4, 3)
    vy, vx = cy + r * np.sin(angles), cx + r * np.cos(angles)
    signs = []
    for a in range(3):
        b = (a + 1) % 3
        signs.append((vx[b] - vx[a]) * (yy - vy[a]) - (vy[b] - vy[a]) * (xx - vx[a]))
    signs = np.stack(signs)
    return np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)


def render_sample(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """One (image [H, W, 3] uint8, mask [H, W] uint8) pair.

    Redraws until foreground coverage falls inside the configured band.
    """
    h, w = spec.size
    while True:
        img = _background(rng, h, w, spec)
        mask = np.zeros((h, w), dtype=bool)
        n_shapes = rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1)
        for _ in range(n_shapes):
            kind = spec.kinds[rng.integers(len(spec.kinds))]
            m = _shape_mask(rng, kind, h, w)
            colour = rng.uniform(0, 1, 3)
            colour[rng.integers(3)] = rng.choice([0.05, 0.95])  # saturate one channel
            gy, gx = rng.normal(0, 0.15, 2)
            yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
            shade = 1.0 + gy * (yy - 0.5) + gx * (xx - 0.5)
            img[:, m] = (colour[:, None, None] * shade[None])[:, m]
            mask |= m
        coverage = mask.mean()
        if spec.min_coverage <= coverage <= spec.max_coverage:
            image = np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
            return image, mask.astype(np.uint8) * 255


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write ``images/<id>.ppm`` and ``masks/<id>.pgm`` under ``out_dir``.

    Each sample draws from its own child seed, so files are independent of
    generation order.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_samples)
    width = max(4, len(str(spec.n_samples - 1)))
    for i, ss in enumerate(children):
        image, mask = render_sample(np.random.default_rng(ss), spec)
        stem = f"{i:0{width}d}"
        write_ppm(out_dir / "images" / f"{stem}.ppm", image)
        write_pgm(out_dir / "masks" / f"{stem}.pgm", mask)
    return out_dir


def augment_flip(s: Sample, coin: float) -> Sample:
    """Mirror image and mask left-right when ``coin < 0.5``."""
    if coin >= 0.5:
        return s
    return Sample(s.image[:, :, ::-1].copy(), s.mask[:, :, ::-1].copy(), s.id)


def stack_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
