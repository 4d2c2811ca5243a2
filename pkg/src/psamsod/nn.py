"""Layer primitives on NCHW tensors: convolution, pooling, resampling, loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, _sigmoid_np, register_op, tensor

__all__ = [
    "ConvParams",
    "conv2d",
    "channel_linear",
    "linear",
    "avg_pool",
    "max_pool",
    "upsample_bilinear",
    "bilinear_matrix",
    "resize_bilinear",
    "bce_loss",
]


@dataclass
class ConvParams:
    weight: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor | None = None  # [out_ch]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel must be odd-sized, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be positive and padding nonnegative")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv output size ({n} + 2*{pad} - {k})/{stride} + 1 is not a positive integer")
    return span // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation plus bias via an im2col matrix product."""
    x = tensor(x)
    w = p.weight
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    s, pad = p.stride, p.padding
    oh, ow = _out_size(h, kh, s, pad), _out_size(wd, kw, s, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if p.bias is not None:
        out += p.bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += gcols[..., i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if p.bias is None else (x, w, p.bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "conv2d")


def channel_linear(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel channel projection: out[n, o, h, w] = sum_c w[o, c] x[n, c, h, w]."""
    x, w = tensor(x), tensor(w)
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel_linear: weight {w.shape} incompatible with input {x.shape}")
    out = np.einsum("oc,nchw->nohw", w.data, x.data, optimize=True)

    def bw(g):
        return (np.einsum("oc,nohw->nchw", w.data, g, optimize=True),
                np.einsum("nohw,nchw->oc", g, x.data, optimize=True))

    return Tensor._from_op(out, (x, w), bw, "channel_linear")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map x @ w + b for x [N, in], w [in, out], b [out]."""
    x, w = tensor(x), tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
        out = out + b.data

    def bw(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, bw, "linear")


def _check_pool(x: Tensor, factor: int) -> None:
    if factor < 1:
        raise ValueError(f"pool factor must be positive, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"pooling expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool factor {factor}")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    x = tensor(x)
    _check_pool(x, factor)
    n, c, h, w = x.shape
    f = factor
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f),)

    return Tensor._from_op(out, (x,), bw, "avg_pool")


def max_pool(x: Tensor, factor: int) -> Tensor:
    """Block max; gradient goes to the first maximal entry in row-major order."""
    x = tensor(x)
    _check_pool(x, factor)
    n, c, h, w = x.shape
    f = factor
    ho, wo = h // f, w // f
    blocks = x.data.reshape(n, c, ho, f, wo, f).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, f * f)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, ho, wo, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), bw, "max_pool")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] interpolation weights, half-pixel centres (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation sizes must be positive")
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def _resample(x: Tensor, out_h: int, out_w: int, op: str) -> Tensor:
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        ah = aw = None
        out = x.data.copy()
    else:
        ah, aw = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
        out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def bw(g):
        if ah is None:
            return (g,)
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return Tensor._from_op(out, (x,), bw, op)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ValueError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    return _resample(x, out_h, out_w, "upsample_bilinear")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [..., H, W] array in either direction with the same kernel."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ah, aw = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    return np.einsum("ih,...hw,jw->...ij", ah, img, aw)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form
    max(z, 0) - z*t + log(1 + exp(-|z|))."""
    z = tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce_loss: logits {z.shape} and target {t.shape} differ")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce_loss: targets must lie in [0, 1]")
    zd = z.data
    loss = np.mean(np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd))))

    def bw(g):
        return (g * (_sigmoid_np(zd) - t) / zd.size,)

    return Tensor._from_op(np.asarray(loss), (z,), bw, "bce_loss")


for _name in ("conv2d", "channel_linear", "linear", "avg_pool", "max_pool",
              "upsample_bilinear", "bce_loss"):
    register_op(_name)
