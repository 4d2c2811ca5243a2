"""Windowed (stand-alone) self-attention over k x k pixel neighbourhoods."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, register_op, softmax, tensor
from .nn import channel_linear

__all__ = [
    "AttentionParams",
    "local_self_attention",
    "attention_weights",
    "window_logits",
    "window_aggregate",
    "window_mask",
]


@dataclass
class AttentionParams:
    """Query/key/value projections, each [C, C], and the odd window size."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    window_k: int = 3

    def __post_init__(self):
        if self.window_k < 1 or self.window_k % 2 == 0:
            raise ValueError(f"window_k must be odd and positive, got {self.window_k}")
        c = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be square [{c}, {c}], got {getattr(self, name).shape}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]


def _unfold(a: np.ndarray, k: int) -> np.ndarray:
    """[N, C, H, W] -> [N, C, H, W, k*k] neighbourhoods, zero outside the map."""
    r = k // 2
    n, c, h, w = a.shape
    ap = np.pad(a, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((n, c, h, w, k * k))
    for di in range(k):
        for dj in range(k):
            out[..., di * k + dj] = ap[:, :, di:di + h, dj:dj + w]
    return out


def _fold(g: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`_unfold`."""
    r = k // 2
    n, c, h, w, _ = g.shape
    gp = np.zeros((n, c, h + 2 * r, w + 2 * r))
    for di in range(k):
        for dj in range(k):
            gp[:, :, di:di + h, dj:dj + w] += g[..., di * k + dj]
    return gp[:, :, r:r + h, r:r + w]


def window_mask(h: int, w: int, k: int) -> np.ndarray:
    """[H, W, k*k] boolean; True where the neighbour lies inside the map."""
    r = k // 2
    ii = np.arange(h)[:, None, None] + (np.arange(k) - r)[None, None, :]
    jj = np.arange(w)[None, :, None] + (np.arange(k) - r)[None, None, :]
    vi = (ii >= 0) & (ii < h)  # [H, 1, k]
    vj = (jj >= 0) & (jj < w)  # [1, W, k]
    return (vi[:, :, :, None] & vj[:, :, None, :]).reshape(h, w, k * k)


def window_logits(q: Tensor, key: Tensor, k: int) -> Tensor:
    """logits[n, h, w, o] = <q[n, :, h, w], key[n, :, h + di, w + dj]>."""
    q, key = tensor(q), tensor(key)
    if q.shape != key.shape:
        raise ShapeError(f"window_logits: query {q.shape} and key {key.shape} differ")
    ku = _unfold(key.data, k)
    out = np.einsum("nchw,nchwo->nhwo", q.data, ku, optimize=True)

    def bw(g):
        gq = np.einsum("nhwo,nchwo->nchw", g, ku, optimize=True)
        gk = _fold(q.data[..., None] * g[:, None], k)
        return gq, gk

    return Tensor._from_op(out, (q, key), bw, "window_logits")


def window_aggregate(weights: Tensor, v: Tensor, k: int) -> Tensor:
    """out[n, c, h, w] = sum_o weights[n, h, w, o] * v[n, c, h + di, w + dj]."""
    weights, v = tensor(weights), tensor(v)
    n, c, h, w = v.shape
    if weights.shape != (n, h, w, k * k):
        raise ShapeError(f"window_aggregate: weights {weights.shape} do not match values {v.shape}, k={k}")
    vu = _unfold(v.data, k)
    out = np.einsum("nhwo,nchwo->nchw", weights.data, vu, optimize=True)

    def bw(g):
        ga = np.einsum("nchw,nchwo->nhwo", g, vu, optimize=True)
        gv = _fold(weights.data[:, None] * g[..., None], k)
        return ga, gv

    return Tensor._from_op(out, (weights, v), bw, "window_aggregate")


register_op("window_logits")
register_op("window_aggregate")


def _check(x: Tensor, p: AttentionParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"attention expects NCHW input, got {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, attention params expect {p.channels}")


def local_self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Each pixel attends over the in-bounds part of its k x k neighbourhood.

    Logits are plain dot products of the projected query and keys (no scaling,
    no positional terms); out-of-map neighbours are excluded from the softmax.
    """
    x = tensor(x)
    _check(x, p)
    k = p.window_k
    q = channel_linear(x, p.w_q)
    key = channel_linear(x, p.w_k)
    v = channel_linear(x, p.w_v)
    mask = window_mask(x.shape[2], x.shape[3], k)
    a = softmax(window_logits(q, key, k), axis=-1, mask=mask[None])
    return window_aggregate(a, v, k)


def attention_weights(x: Tensor, p: AttentionParams, i: int, j: int, n: int = 0) -> Tensor:
    """Softmax weights pixel (i, j) of batch item ``n`` gives its valid
    neighbours, in row-major neighbourhood order."""
    x = tensor(x)
    _check(x, p)
    h, w = x.shape[2:]
    if not (0 <= i < h and 0 <= j < w) or not 0 <= n < x.shape[0]:
        raise IndexError(f"pixel ({n}, {i}, {j}) outside input of shape {x.shape}")
    k = p.window_k
    xs = x.data[n:n + 1]
    q = np.einsum("oc,nchw->nohw", p.w_q.data, xs)
    key = np.einsum("oc,nchw->nohw", p.w_k.data, xs)
    logits = np.einsum("nchw,nchwo->nhwo", q, _unfold(key, k))[0, i, j]
    valid = window_mask(h, w, k)[i, j]
    return softmax(Tensor(logits[valid]), axis=-1)
