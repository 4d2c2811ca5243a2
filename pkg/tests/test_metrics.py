import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psamsod.metrics import (
    BETA_SQ,
    EvalPair,
    confusion_counts,
    evaluate,
    f_measure,
    mae,
    pr_at_threshold,
    read_pr_csv,
    thresholds,
)

P22 = np.array([[0.9, 0.4], [0.1, 0.8]])
G22 = np.array([[1.0, 0.0], [0.0, 0.0]])


def brute_pr(preds, gts, t):
    """Pixel loop over all pairs, counts pooled."""
    tp = fp = fn = 0
    for p, g in zip(preds, gts):
        for pv, gv in zip(p.ravel(), g.ravel()):
            pos = pv >= t
            tp += pos and gv == 1
            fp += pos and gv == 0
            fn += (not pos) and gv == 1
    prec = tp / (tp + fp) if tp + fp else 1.0
    rec = tp / (tp + fn) if tp + fn else 1.0
    return prec, rec


def test_mae_examples():
    z = np.zeros((4, 4))
    assert mae([EvalPair(z, z)]) == 0.0
    assert mae([EvalPair(np.ones((4, 4)), z)]) == 1.0
    assert mae([EvalPair(np.full((4, 4), 0.3), z)]) == pytest.approx(0.3, abs=1e-15)


def test_mae_is_per_image_then_mean():
    a = EvalPair(np.ones((2, 2)), np.zeros((2, 2)))
    b = EvalPair(np.zeros((4, 4)), np.zeros((4, 4)))
    assert mae([a, b]) == 0.5


def test_hand_counted_confusion_2x2():
    tp, fp, fn = confusion_counts(EvalPair(P22, G22), np.array([0.5]))
    assert (tp[0], fp[0], fn[0]) == (1, 1, 0)
    assert pr_at_threshold([EvalPair(P22, G22)], 0.5) == (0.5, 1.0)


def test_hand_case_in_report_bucket():
    rep = evaluate([EvalPair(P22, G22)])
    # 0.5 is not a grid point; thresholds 128/255 .. 204/255 bracket the same binarisation
    for t, p, r in rep.pr_curve:
        if 0.4 < t <= 0.8:
            assert (p, r) == (0.5, 1.0)


def test_perfect_and_threshold_zero():
    g = (np.random.default_rng(0).random((6, 6)) > 0.5).astype(float)
    for t in (1e-9, 0.3, 1.0):
        assert pr_at_threshold([EvalPair(g, g)], t) == (1.0, 1.0)
    assert pr_at_threshold([EvalPair(np.random.default_rng(1).random((6, 6)), g)], 0.0)[1] == 1.0
    rep = evaluate([EvalPair(g, g)])
    assert rep.max_f == 1.0 and rep.mae == 0.0
    assert evaluate([EvalPair(1 - g, g)]).mae == 1.0


def test_empty_denominators_are_one():
    z = np.zeros((3, 3))
    assert pr_at_threshold([EvalPair(z, z)], 0.5) == (1.0, 1.0)


def test_f_measure_examples():
    assert f_measure(1.0, 1.0) == 1.0
    assert f_measure(0.8, 0.5) == pytest.approx(0.52 / 0.74, abs=1e-12)
    assert f_measure(0.0, 0.0) == 0.0
    assert BETA_SQ == 0.3


@given(st.floats(0, 1))
def test_f_of_equal_pr_is_identity(x):
    assert f_measure(x, x) == pytest.approx(x, abs=1e-15)


def test_thresholds_grid_and_errors():
    ts = thresholds(256)
    assert ts[0] == 0.0 and ts[-1] == 1.0 and ts[1] == 1 / 255
    assert np.all(np.diff(ts) > 0)
    with pytest.raises(ValueError):
        evaluate([EvalPair(P22, G22)], n_thresholds=1)


def test_pair_validation():
    with pytest.raises(ValueError):
        EvalPair(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        EvalPair(np.full((2, 2), 1.5), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EvalPair(np.zeros((2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        mae([])
    with pytest.raises(ValueError):
        evaluate([EvalPair(P22, G22)], average="weighted")


def random_pairs(seed, n=3, shape=(5, 7)):
    rng = np.random.default_rng(seed)
    preds = [np.round(rng.random(shape), 2) for _ in range(n)]
    gts = [(rng.random(shape) > 0.6).astype(float) for _ in range(n)]
    return preds, gts


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sweep_matches_brute_force(seed):
    preds, gts = random_pairs(seed)
    pairs = [EvalPair(p, g) for p, g in zip(preds, gts)]
    rep = evaluate(pairs, n_thresholds=11)
    for t, p, r in rep.pr_curve:
        bp, br = brute_pr(preds, gts, t)
        assert p == pytest.approx(bp, abs=1e-12) and r == pytest.approx(br, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["micro", "macro"]))
def test_report_invariants(seed, average):
    preds, gts = random_pairs(seed)
    rep = evaluate([EvalPair(p, g) for p, g in zip(preds, gts)], average=average)
    prec = np.array([p for _, p, _ in rep.pr_curve])
    rec = np.array([r for _, _, r in rep.pr_curve])
    f = np.array(rep.f_curve)
    assert np.all(np.diff(rec) <= 0)
    assert rep.max_f >= rep.mean_f
    for arr in (prec, rec, f):
        assert np.all((arr >= 0) & (arr <= 1))
    assert 0 <= rep.mae <= 1


def test_macro_differs_from_micro_and_matches_per_image_mean():
    preds, gts = random_pairs(5, n=2, shape=(3, 3))
    pairs = [EvalPair(p, g) for p, g in zip(preds, gts)]
    per_image = [pr_at_threshold([q], 0.5) for q in pairs]
    macro = pr_at_threshold(pairs, 0.5, average="macro")
    assert macro[0] == pytest.approx(np.mean([p for p, _ in per_image]))
    assert macro[1] == pytest.approx(np.mean([r for _, r in per_image]))


def test_exports_round_trip(tmp_path):
    preds, gts = random_pairs(9)
    rep = evaluate([EvalPair(p, g) for p, g in zip(preds, gts)])
    pr_path, summary_path = rep.write(tmp_path)
    lines = pr_path.read_text().splitlines()
    assert lines[0] == "# psamsod-pr/1 beta_sq=0.3"
    assert lines[1] == "threshold,precision,recall,f"
    rows = read_pr_csv(pr_path)
    assert len(rows) == 256
    assert [r[:3] for r in rows] == rep.pr_curve
    assert [r[3] for r in rows] == rep.f_curve
    summary = summary_path.read_text().strip()
    fields = dict(kv.split("=") for kv in summary.split()[1:])
    assert summary.startswith("psamsod-summary/1 ")
    assert float(fields["max_f"]) == rep.max_f and float(fields["mae"]) == rep.mae
