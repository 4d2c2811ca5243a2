"""Finite-difference verification of every differentiable op and of the
composite modules, used by the ``gradcheck`` command and the test-suite."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, local_self_attention, window_aggregate, window_logits
from .autodiff import OP_REGISTRY, Tensor, backward, gradcheck, numerical_grad, relative_error
from .channel_attention import channel_attention, init_se, rescale
from .model import Model, ModelConfig, build_model, forward
from .nn import (
    ConvParams,
    avg_pool,
    bce_loss,
    channel_linear,
    conv2d,
    linear,
    max_pool,
    upsample_bilinear,
)
from .psam import init_psam, psam_forward

__all__ = ["CheckResult", "OP_TOL", "COMPOSITE_TOL", "op_checks", "model_gradcheck", "run_suite", "corrupt_backward"]

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    component: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _u(rng, *shape):
    return rng.uniform(-1, 1, shape)


def _weighted(out: Tensor, seed: int) -> Tensor:
    # fixed random projection so every output coordinate matters
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return (out * Tensor(w)).sum()


def _op_cases() -> dict[str, Callable[[np.random.Generator], float]]:
    """name -> check(rng) returning the max relative error for that op."""

    def unary(op, shape=(3, 4), kinkless=False):
        def case(rng):
            s = int(rng.integers(2**31))
            x = _u(rng, *shape)
            if kinkless:
                x[np.abs(x) < 0.05] = 0.25
            return gradcheck(lambda t: _weighted(op(t), s), x)
        return case

    def with_const(op, const_shape, shape):
        # differentiate w.r.t. the first operand; the second is a fixed tensor
        def case(rng):
            c = Tensor(_u(rng, *const_shape))
            return unary(lambda t: op(t, c), shape)(rng)
        return case

    def conv_case(rng):
        p = ConvParams(Tensor(_u(rng, 3, 2, 3, 3)), Tensor(_u(rng, 3)), stride=2, padding=1)
        x = Tensor(_u(rng, 2, 2, 5, 5))
        s = int(rng.integers(2**31))
        errs = [gradcheck(lambda t: _weighted(conv2d(t, p), s), x.data.copy())]
        errs.append(gradcheck(lambda w: _weighted(conv2d(x, ConvParams(w, p.bias, 2, 1)), s), p.weight.data.copy()))
        errs.append(gradcheck(lambda b: _weighted(conv2d(x, ConvParams(p.weight, b, 2, 1)), s), p.bias.data.copy()))
        return max(errs)

    def max_pool_case(rng):
        # distinct values keep the argmax stable under the finite-difference step
        s = int(rng.integers(2**31))
        x = rng.permutation(64).reshape(1, 4, 4, 4) / 64.0
        return gradcheck(lambda t: _weighted(max_pool(t, 2), s), x)

    def window_logits_case(rng):
        q, key = Tensor(_u(rng, 1, 2, 4, 4)), Tensor(_u(rng, 1, 2, 4, 4))
        s = int(rng.integers(2**31))
        return max(gradcheck(lambda t: _weighted(window_logits(t, key, 3), s), q.data.copy()),
                   gradcheck(lambda t: _weighted(window_logits(q, t, 3), s), key.data.copy()))

    def window_aggregate_case(rng):
        a, v = Tensor(rng.random((1, 4, 4, 9))), Tensor(_u(rng, 1, 2, 4, 4))
        s = int(rng.integers(2**31))
        return max(gradcheck(lambda t: _weighted(window_aggregate(t, v, 3), s), a.data.copy()),
                   gradcheck(lambda t: _weighted(window_aggregate(a, t, 3), s), v.data.copy()))

    def rescale_case(rng):
        x, sc = Tensor(_u(rng, 2, 3, 3, 3)), Tensor(rng.random((2, 3)))
        s = int(rng.integers(2**31))
        return max(gradcheck(lambda t: _weighted(rescale(t, sc), s), x.data.copy()),
                   gradcheck(lambda t: _weighted(rescale(x, t), s), sc.data.copy()))

    def linear_case(rng):
        x, w, b = Tensor(_u(rng, 2, 4)), Tensor(_u(rng, 4, 3)), Tensor(_u(rng, 3))
        s = int(rng.integers(2**31))
        return max(gradcheck(lambda t: _weighted(linear(t, w, b), s), x.data.copy()),
                   gradcheck(lambda t: _weighted(linear(x, t, b), s), w.data.copy()),
                   gradcheck(lambda t: _weighted(linear(x, w, t), s), b.data.copy()))

    def bce_case(rng):
        t = (rng.random((2, 1, 3, 3)) > 0.5).astype(float)
        return gradcheck(lambda z: bce_loss(z, t), _u(rng, 2, 1, 3, 3))

    return {
        "add": with_const(ad.add, (3, 4), (3, 4)),
        "sub": with_const(lambda t, c: ad.sub(c, t), (3, 4), (3, 4)),
        "mul": with_const(ad.mul, (3, 4), (3, 4)),
        "scale": unary(lambda t: ad.scale(t, -1.7)),
        "relu": unary(ad.relu, kinkless=True),
        "sigmoid": unary(ad.sigmoid),
        "matmul": with_const(ad.matmul, (4, 2), (3, 4)),
        "sum": unary(lambda t: t.sum(axis=1)),
        "reshape": unary(lambda t: t.reshape(4, 3)),
        "transpose": unary(lambda t: t.T),
        "getitem": unary(lambda t: t[1:, ::2]),
        "softmax": unary(lambda t: ad.softmax(t, axis=1)),
        "concat": unary(lambda t: ad.concat([t, t * t], axis=0)),
        "conv2d": conv_case,
        "channel_linear": with_const(lambda t, w: channel_linear(t, w), (3, 2), (1, 2, 3, 3)),
        "linear": linear_case,
        "avg_pool": unary(lambda t: avg_pool(t, 2), (1, 2, 4, 4)),
        "max_pool": max_pool_case,
        "upsample_bilinear": unary(lambda t: upsample_bilinear(t, 5, 7), (1, 2, 2, 3)),
        "bce_loss": bce_case,
        "window_logits": window_logits_case,
        "window_aggregate": window_aggregate_case,
        "rescale": rescale_case,
    }


def op_checks(seed: int = 0) -> list[CheckResult]:
    cases = _op_cases()
    missing = set(OP_REGISTRY) - set(cases)
    if missing:
        raise RuntimeError(f"no gradient check registered for ops: {sorted(missing)}")
    results = []
    for name in sorted(cases):
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        results.append(CheckResult(f"op:{name}", cases[name](rng), OP_TOL))
    return results


def _check_params(loss_fn: Callable[[], Tensor], params: list[Tensor], coords, h: float = 1e-5) -> float:
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for pi, idx in coords:
        p = params[pi]
        analytic = 0.0 if p.grad is None else p.grad.reshape(-1)[idx]
        numeric = numerical_grad(loss_fn, p, h, [idx])[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def model_gradcheck(model: Model, images: np.ndarray, masks: np.ndarray, n_coords: int = 20,
                    rng: np.random.Generator | None = None, h: float = 1e-5) -> tuple[float, int]:
    """Max relative error of d(BCE)/d(param) on ``n_coords`` sampled coordinates."""
    rng = rng or np.random.default_rng(0)
    params = model.parameters()
    sizes = np.array([p.size for p in params])
    flat = rng.choice(sizes.sum(), size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords = []
    for f in sorted(flat):
        pi = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((pi, int(f - offsets[pi])))
    x = Tensor(images)
    err = _check_params(lambda: bce_loss(forward(model, x), masks), params, coords, h)
    return err, len(coords)


def composite_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    att = AttentionParams(*(Tensor(_u(rng, 3, 3) * 0.8, requires_grad=True) for _ in range(3)), window_k=3)
    xa = _u(rng, 1, 3, 5, 5)
    ga = Tensor(_u(rng, 1, 3, 5, 5))
    err = gradcheck(lambda t: (local_self_attention(t, att) * ga).sum(), xa)
    xt = Tensor(xa)
    for p in att.parameters():
        err = max(err, gradcheck(lambda _: (local_self_attention(xt, att) * ga).sum(), p))
    out.append(CheckResult("local_self_attention", err, OP_TOL))

    se = init_se(4, 2, rng)
    gs = Tensor(_u(rng, 1, 4, 4, 4))
    err = gradcheck(lambda t: (channel_attention(t, se) * gs).sum(), _u(rng, 1, 4, 4, 4))
    xs = Tensor(_u(rng, 1, 4, 4, 4))
    for p in se.parameters():
        err = max(err, gradcheck(lambda _: (channel_attention(xs, se) * gs).sum(), p))
    out.append(CheckResult("channel_attention", err, COMPOSITE_TOL))

    psam = init_psam(2, rng)
    gp = Tensor(_u(rng, 1, 2, 8, 8))
    err = gradcheck(lambda t: (psam_forward(t, psam).fused * gp).sum(), _u(rng, 1, 2, 8, 8))
    xp = Tensor(_u(rng, 1, 2, 8, 8))
    for p in psam.parameters():
        err = max(err, gradcheck(lambda _: (psam_forward(xp, psam).fused * gp).sum(), p))
    out.append(CheckResult("psam", err, COMPOSITE_TOL))

    for variant in ("baseline", "baseline_sa", "full"):
        model = build_model(ModelConfig(variant=variant), seed)
        images = rng.random((1, 3, 64, 64))
        masks = (rng.random((1, 1, 64, 64)) > 0.5).astype(float)
        err, _ = model_gradcheck(model, images, masks, n_coords=20, rng=rng)
        out.append(CheckResult(f"model:{variant}", err, COMPOSITE_TOL))
    return out


def run_suite(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + composite_checks(seed)


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5):
    """Test hook: scale the gradient rule of ``op`` by ``factor``."""
    original = Tensor._from_op.__func__

    def patched(cls, data, parents, backward_fn, name):
        if name == op and backward_fn is not None:
            inner = backward_fn

            def backward_fn(g):
                return [None if r is None else r * factor for r in inner(g)]

        return original(cls, data, parents, backward_fn, name)

    Tensor._from_op = classmethod(patched)
    try:
        yield
    finally:
        Tensor._from_op = classmethod(original)
