import numpy as np
import pytest

from psamsod.attention import AttentionParams, attention_weights, local_self_attention
from psamsod.autodiff import ShapeError, Tensor, gradcheck


def make_params(rng, c, k=3, scale=1.0):
    return AttentionParams(*(Tensor(rng.uniform(-scale, scale, (c, c))) for _ in range(3)), window_k=k)


def attention_oracle(x, wq, wk, wv, k):
    """Literal per-pixel evaluation: softmax over in-bounds neighbours of
    q_ij . k_ab, then the weighted sum of v_ab."""
    n, c, h, w = x.shape
    r = k // 2
    out = np.zeros_like(x)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                q = wq @ x[b, :, i, j]
                logits, values = [], []
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        a, bb = i + di, j + dj
                        if 0 <= a < h and 0 <= bb < w:
                            logits.append(q @ (wk @ x[b, :, a, bb]))
                            values.append(wv @ x[b, :, a, bb])
                logits = np.array(logits)
                e = np.exp(logits - logits.max())
                weights = e / e.sum()
                out[b, :, i, j] = sum(wt * v for wt, v in zip(weights, values))
    return out


def test_window_one_is_value_projection():
    rng = np.random.default_rng(0)
    p = make_params(rng, 3, k=1)
    x = rng.standard_normal((2, 3, 4, 5))
    ref = np.einsum("oc,nchw->nohw", p.w_v.data, x)
    np.testing.assert_allclose(local_self_attention(Tensor(x), p).data, ref, atol=1e-14)


def test_zero_query_on_constant_field():
    rng = np.random.default_rng(1)
    p = make_params(rng, 4)
    p.w_q.data[:] = 0.0
    v = rng.standard_normal(4)
    x = np.broadcast_to(v[None, :, None, None], (1, 4, 5, 5)).copy()
    out = local_self_attention(Tensor(x), p).data
    np.testing.assert_allclose(out, np.broadcast_to((p.w_v.data @ v)[None, :, None, None], out.shape), atol=1e-14)


def test_matches_oracle_1x3x5x5():
    rng = np.random.default_rng(2)
    p = make_params(rng, 3)
    x = rng.standard_normal((1, 3, 5, 5))
    ref = attention_oracle(x, p.w_q.data, p.w_k.data, p.w_v.data, 3)
    np.testing.assert_allclose(local_self_attention(Tensor(x), p).data, ref, atol=1e-10, rtol=0)


@pytest.mark.parametrize("k", [3, 5])
def test_matches_oracle_batch_and_wide_window(k):
    rng = np.random.default_rng(3 + k)
    p = make_params(rng, 4, k=k)
    x = rng.standard_normal((2, 4, 6, 6))
    ref = attention_oracle(x, p.w_q.data, p.w_k.data, p.w_v.data, k)
    np.testing.assert_allclose(local_self_attention(Tensor(x), p).data, ref, atol=1e-10, rtol=0)


def test_shape_preserved_and_errors():
    rng = np.random.default_rng(4)
    p = make_params(rng, 3)
    assert local_self_attention(Tensor(np.ones((2, 3, 1, 7))), p).shape == (2, 3, 1, 7)
    with pytest.raises(ShapeError):
        local_self_attention(Tensor(np.ones((1, 4, 3, 3))), p)
    with pytest.raises(ValueError):
        make_params(rng, 3, k=2)
    with pytest.raises(ShapeError):
        AttentionParams(Tensor(np.ones((3, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones((3, 3))))


def test_attention_weights_interior_corner_and_uniform():
    rng = np.random.default_rng(5)
    p = make_params(rng, 3)
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    inner = attention_weights(x, p, 2, 2).data
    assert inner.shape == (9,) and inner.sum() == pytest.approx(1.0, abs=1e-9)
    corner = attention_weights(x, p, 0, 0).data
    assert corner.shape == (4,) and corner.sum() == pytest.approx(1.0, abs=1e-9)
    p.w_q.data[:] = 0
    np.testing.assert_allclose(attention_weights(x, p, 0, 2).data, np.full(6, 1 / 6))
    with pytest.raises(IndexError):
        attention_weights(x, p, 5, 0)


def test_uniform_logit_shift_invariance():
    # keys offset by a constant vector d shift every logit of pixel (i, j) by
    # the same q_ij . d; realised with an extra all-ones input channel
    rng = np.random.default_rng(6)
    c = 3
    p = make_params(rng, c)
    x = rng.standard_normal((1, c, 5, 5))
    base = local_self_attention(Tensor(x), p).data
    xa = np.concatenate([x, np.ones((1, 1, 5, 5))], axis=1)
    wq, wk, wv = (np.zeros((c + 1, c + 1)) for _ in range(3))
    wq[:c, :c], wk[:c, :c], wv[:c, :c] = p.w_q.data, p.w_k.data, p.w_v.data
    wk[:c, c] = 5.0 * rng.standard_normal(c)
    out = local_self_attention(Tensor(xa), AttentionParams(Tensor(wq), Tensor(wk), Tensor(wv))).data
    np.testing.assert_allclose(out[:, :c], base, atol=1e-9)


def test_translation_equivariance_interior():
    rng = np.random.default_rng(7)
    p = make_params(rng, 2)
    x = np.zeros((1, 2, 9, 9))
    x[:, :, 2:6, 2:6] = rng.standard_normal((1, 2, 4, 4))
    shifted = np.roll(x, 1, axis=3)
    a = local_self_attention(Tensor(x), p).data
    b = local_self_attention(Tensor(shifted), p).data
    # windows of output pixels 1..6 (and their shifted counterparts 2..7) never touch the border
    np.testing.assert_allclose(b[:, :, 1:8, 2:8], a[:, :, 1:8, 1:7], atol=1e-9)


def test_gradcheck_all_inputs():
    rng = np.random.default_rng(8)
    p = make_params(rng, 3, scale=0.8)
    x = rng.uniform(-1, 1, (1, 3, 4, 4))
    g = Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)))
    assert gradcheck(lambda t: (local_self_attention(t, p) * g).sum(), x) < 1e-4
    xt = Tensor(x)
    for name in ("w_q", "w_k", "w_v"):
        def f(w, name=name):
            parts = {n: getattr(p, n) for n in ("w_q", "w_k", "w_v")}
            parts[name] = w
            return (local_self_attention(xt, AttentionParams(**parts, window_k=3)) * g).sum()

        assert gradcheck(f, getattr(p, name).data.copy()) < 1e-4, name
