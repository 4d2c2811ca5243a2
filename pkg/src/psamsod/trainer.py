"""Adam with decoupled weight decay, two-phase step schedule, training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .dataio import Sample, augment_flip, stack_batch
from .model import Model, forward, save_checkpoint
from .nn import bce_loss

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "TrainLogRecord",
    "TrainResult",
    "NonFiniteError",
    "train",
    "write_log",
]

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


@dataclass
class TrainConfig:
    epochs: int = 24
    lr_phase1: float = 5e-5
    lr_phase2: float = 5e-6
    phase1_epochs: int = 15
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    flip: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.phase1_epochs <= self.epochs:
            raise ValueError(f"phase1_epochs {self.phase1_epochs} must lie in [0, epochs={self.epochs}]")
        if self.lr_phase1 < 0 or self.lr_phase2 < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be nonnegative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Short-budget profile for the 64x64 synthetic benchmark."""
        base = dict(epochs=10, lr_phase1=3e-3, lr_phase2=3e-4, phase1_epochs=6)
        base.update(overrides)
        if "phase1_epochs" not in overrides:
            # a shortened run keeps phase one no longer than the run itself
            base["phase1_epochs"] = min(base["phase1_epochs"], base["epochs"])
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {"paper": TrainConfig, "desk": TrainConfig.desk}


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, cfg: TrainConfig) -> AdamState:
    """In-place bias-corrected Adam update with decoupled decay.

    Decay is applied first: p <- p - lr * wd * p, then p <- p - lr * m_hat / (sqrt(v_hat) + eps).
    A missing gradient is treated as zero.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state have different lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i} (shape {p.shape}) at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p.data) if g is None else g
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr_phase1 if epoch < cfg.phase1_epochs else cfg.lr_phase2


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    wall_ms: float


@dataclass
class TrainResult:
    model: Model
    log: list[TrainLogRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


LOG_FIELDS = ("epoch", "step", "loss", "lr", "wall_ms")


def write_log(records: Sequence[TrainLogRecord], path, timing: bool = True) -> Path:
    path = Path(path)
    fields = LOG_FIELDS if timing else LOG_FIELDS[:-1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in records:
            row = [r.epoch, r.step, repr(r.loss), repr(r.lr), f"{r.wall_ms:.3f}"]
            w.writerow(row[:len(fields)])
    return path


def train(model: Model, dataset: Sequence[Sample], cfg: TrainConfig, out_dir=None,
          on_step: Callable[[TrainLogRecord], None] | None = None) -> TrainResult:
    """Mini-batch training with seeded shuffling and flip augmentation.

    When ``out_dir`` is given a checkpoint ``epoch_XXX.ckpt`` is written after
    every epoch and ``final.ckpt`` at the end. A non-finite value anywhere in
    a step aborts after saving the current weights to ``diagnostic.ckpt``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    size = model.config.input_size
    if tuple(dataset[0].image.shape[1:]) != size:
        raise ValueError(f"samples are {dataset[0].image.shape[1:]}, model expects {size}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState.for_params(params)
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(dataset))
        coins = rng.random(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            t0 = time.perf_counter()
            idx = order[start:start + cfg.batch_size]
            batch = [augment_flip(dataset[i], coins[i]) if cfg.flip else dataset[i] for i in idx]
            images, masks = stack_batch(batch)
            model.zero_grad()
            try:
                loss = bce_loss(forward(model, images), masks)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"non-finite loss {value}")
                backward(loss)
                adam_step(params, [p.grad for p in params], state, lr, cfg)
            except FloatingPointError as exc:
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "diagnostic.ckpt")
                raise NonFiniteError(f"epoch {epoch}, step {step + 1}: {exc}") from exc
            step += 1
            rec = TrainLogRecord(epoch, step, value, lr, (time.perf_counter() - t0) * 1000.0)
            result.log.append(rec)
            if on_step is not None:
                on_step(rec)
        epoch_losses = [r.loss for r in result.log if r.epoch == epoch]
        logger.info("epoch %d lr %.2e mean loss %.5f", epoch, lr, float(np.mean(epoch_losses)))
        if out_dir is not None:
            result.checkpoints.append(save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.ckpt"))
    if out_dir is not None:
        result.checkpoints.append(save_checkpoint(model, out_dir / "final.ckpt"))
    return result


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
