"""Saliency evaluation: threshold-swept precision/recall, F-beta and MAE."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BETA_SQ",
    "EvalPair",
    "MetricsReport",
    "mae",
    "confusion_counts",
    "pr_at_threshold",
    "f_measure",
    "thresholds",
    "evaluate",
    "read_pr_csv",
]

BETA_SQ = 0.3
PR_FORMAT = "psamsod-pr/1"
SUMMARY_FORMAT = "psamsod-summary/1"


@dataclass
class EvalPair:
    prediction: np.ndarray  # [H, W] in [0, 1]
    ground_truth: np.ndarray  # [H, W] in {0, 1}

    def __post_init__(self):
        self.prediction = np.asarray(self.prediction, dtype=np.float64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        if self.prediction.shape != self.ground_truth.shape:
            raise ValueError(
                f"prediction {self.prediction.shape} and ground truth {self.ground_truth.shape} differ")
        if self.prediction.size and (self.prediction.min() < 0 or self.prediction.max() > 1):
            raise ValueError("prediction values must lie in [0, 1]")
        if not np.all((self.ground_truth == 0) | (self.ground_truth == 1)):
            raise ValueError("ground truth must be binary")


def _pairs(pairs) -> list[EvalPair]:
    pairs = [p if isinstance(p, EvalPair) else EvalPair(*p) for p in pairs]
    if not pairs:
        raise ValueError("need at least one prediction/ground-truth pair")
    return pairs


def mae(pairs: Iterable[EvalPair]) -> float:
    """Per-image mean |P - G|, averaged over images."""
    pairs = _pairs(pairs)
    return float(np.mean([np.abs(p.prediction - p.ground_truth).mean() for p in pairs]))


def confusion_counts(pair: EvalPair, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """TP, FP, FN at each threshold, binarising with P >= t."""
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    gt = pair.ground_truth.astype(bool)
    pos = np.sort(pair.prediction[gt])
    neg = np.sort(pair.prediction[~gt])
    tp = pos.size - np.searchsorted(pos, ts, side="left")
    fp = neg.size - np.searchsorted(neg, ts, side="left")
    fn = pos.size - tp
    return tp, fp, fn


def _precision_recall(tp, fp, fn) -> tuple[np.ndarray, np.ndarray]:
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 1.0)
    return precision, recall


def _sweep(pairs: list[EvalPair], ts: np.ndarray, average: str) -> tuple[np.ndarray, np.ndarray]:
    if average == "micro":
        tp = fp = fn = 0
        for p in pairs:
            a, b, c = confusion_counts(p, ts)
            tp, fp, fn = tp + a, fp + b, fn + c
        return _precision_recall(tp, fp, fn)
    if average == "macro":
        prs = [_precision_recall(*confusion_counts(p, ts)) for p in pairs]
        return np.mean([p for p, _ in prs], axis=0), np.mean([r for _, r in prs], axis=0)
    raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")


def pr_at_threshold(pairs, t: float, average: str = "micro") -> tuple[float, float]:
    precision, recall = _sweep(_pairs(pairs), np.array([float(t)]), average)
    return float(precision[0]), float(recall[0])


def f_measure(precision, recall, beta_sq: float = BETA_SQ):
    """Weighted harmonic mean; 0 where precision and recall are both 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta_sq * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(den > 0, (1.0 + beta_sq) * p * r / den, 0.0)
    return float(f) if f.ndim == 0 else f


def thresholds(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError(f"need at least 2 thresholds, got {n}")
    return np.arange(n) / (n - 1)


@dataclass
class MetricsReport:
    pr_curve: list[tuple[float, float, float]]  # (threshold, precision, recall)
    max_f: float
    mean_f: float
    mae: float
    beta_sq: float = BETA_SQ
    f_curve: list[float] = field(default_factory=list)

    def summary_line(self) -> str:
        return f"{SUMMARY_FORMAT} max_f={self.max_f!r} mean_f={self.mean_f!r} mae={self.mae!r}"

    def pr_csv(self) -> str:
        lines = [f"# {PR_FORMAT} beta_sq={self.beta_sq!r}", "threshold,precision,recall,f"]
        for (t, p, r), f in zip(self.pr_curve, self.f_curve):
            lines.append(f"{t!r},{p!r},{r!r},{f!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        pr_path, summary_path = out_dir / "pr_curve.csv", out_dir / "summary.txt"
        pr_path.write_text(self.pr_csv())
        summary_path.write_text(self.summary_line() + "\n")
        return pr_path, summary_path


def read_pr_csv(path) -> list[tuple[float, float, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("threshold"):
            continue
        rows.append(tuple(float(v) for v in line.split(",")))
    return rows


def evaluate(pairs: Sequence[EvalPair], n_thresholds: int = 256, beta_sq: float = BETA_SQ,
             average: str = "micro") -> MetricsReport:
    pairs = _pairs(pairs)
    ts = thresholds(n_thresholds)
    precision, recall = _sweep(pairs, ts, average)
    f = f_measure(precision, recall, beta_sq)
    return MetricsReport(
        pr_curve=[(float(t), float(p), float(r)) for t, p, r in zip(ts, precision, recall)],
        max_f=float(f.max()),
        mean_f=float(f.mean()),
        mae=mae(pairs),
        beta_sq=beta_sq,
        f_curve=[float(v) for v in f],
    )
