"""scikit-learn style wrapper around model construction, training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataio import Sample
from .metrics import EvalPair, evaluate
from .model import ModelConfig, build_model, normalize_variant, predict as model_predict
from .trainer import PROFILES, train, with_overrides

__all__ = ["SaliencyDetector", "check_images", "check_masks"]


def check_images(X, input_size: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a float image batch ``[N, 3, H, W]`` with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"images must have shape [N, 3, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("image batch is empty")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError("image values must be finite and lie in [0, 1]")
    if input_size is not None and tuple(X.shape[2:]) != tuple(input_size):
        raise ValueError(f"images are {X.shape[2]}x{X.shape[3]}, expected {input_size[0]}x{input_size[1]}")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    """Validate binary masks ``[N, H, W]`` or ``[N, 1, H, W]``; returns ``[N, 1, H, W]``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != (X.shape[0], 1) + X.shape[2:]:
        raise ValueError(f"masks of shape {y.shape} do not match images {X.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary (0 or 1)")
    return y


class SaliencyDetector(BaseEstimator):
    """Salient-object detector with ``fit`` / ``predict_proba`` / ``predict``.

    ``epochs``, ``lr_phase1`` and ``lr_phase2`` of ``None`` take the values of
    the selected training profile ("paper" or "desk").
    """

    def __init__(self, variant="full", profile="desk", epochs=None, lr_phase1=None, lr_phase2=None,
                 batch_size=8, fpn_channels=32, psam_scales=(1, 1, 2), window_k=3, se_reduction=4,
                 threshold=0.5, seed=0):
        self.variant = variant
        self.profile = profile
        self.epochs = epochs
        self.lr_phase1 = lr_phase1
        self.lr_phase2 = lr_phase2
        self.batch_size = batch_size
        self.fpn_channels = fpn_channels
        self.psam_scales = psam_scales
        self.window_k = window_k
        self.se_reduction = se_reduction
        self.threshold = threshold
        self.seed = seed

    def _train_config(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        overrides = {k: getattr(self, k) for k in ("epochs", "lr_phase1", "lr_phase2") if getattr(self, k) is not None}
        return with_overrides(PROFILES[self.profile](**overrides), batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        cfg = ModelConfig(input_size=tuple(X.shape[2:]), fpn_channels=self.fpn_channels,
                          psam_scales=tuple(self.psam_scales), window_k=self.window_k,
                          se_reduction=self.se_reduction, variant=normalize_variant(self.variant))
        self.model_ = build_model(cfg, self.seed)
        data = [Sample(x, m, str(i)) for i, (x, m) in enumerate(zip(X, y))]
        self.train_result_ = train(self.model_, data, self._train_config())
        self.n_parameters_ = self.model_.n_parameters()
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Saliency probabilities ``[N, H, W]``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.input_size)
        return model_predict(self.model_, X).data[:, 0]

    def predict(self, X) -> np.ndarray:
        """Binary saliency masks ``[N, H, W]`` at ``threshold``."""
        return (self.predict_proba(X) >= self.threshold).astype(np.float64)

    def score(self, X, y) -> float:
        """Max F-measure over the threshold sweep."""
        P = self.predict_proba(X)
        y = check_masks(y, check_images(X))
        return evaluate([EvalPair(p, g[0]) for p, g in zip(P, y)]).max_f
