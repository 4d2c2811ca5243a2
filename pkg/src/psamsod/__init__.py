"""Pyramid self-attention salient object detection on a small numpy autodiff core."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, gradcheck
from .estimator import SaliencyDetector
from .metrics import EvalPair, evaluate
from .model import ModelConfig, build_model, forward, load_checkpoint, predict, save_checkpoint
from .trainer import TrainConfig, train

__all__ = [
    "__version__",
    "Tensor",
    "backward",
    "gradcheck",
    "SaliencyDetector",
    "EvalPair",
    "evaluate",
    "ModelConfig",
    "build_model",
    "forward",
    "predict",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
]
