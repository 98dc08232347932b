"""Supervised training: pixel-wise cross-entropy, SGD with momentum, batch size 1."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .dataset import IGNORE_INDEX, SegmentationSample
from .errors import ParameterError, TrainingError, UsageError
from .metrics import ConfusionMatrix, summarize
from .model import CaveSegModel, image_to_tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Mapping[str, T.Tensor], state: OptimizerState) -> None:
    """In-place update ``v <- momentum * v + g``, ``w <- w - lr * v``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}; call backward() first")
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise UsageError(f"velocity shape {v.shape} does not match parameter {name} {p.data.shape}")
        v *= state.momentum
        v += p.grad
        p.data -= state.learning_rate * v


@dataclass
class TrainConfig:
    epochs: int = 1
    seed: int = 0
    learning_rate: float = 1e-4
    momentum: float = 0.9
    ignore_index: int = IGNORE_INDEX
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None


@dataclass
class TrainReport:
    seed: int
    learning_rate: float
    momentum: float
    losses: list = field(default_factory=list)
    val_metrics: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "steps": len(self.losses),
            "losses": self.losses,
            "val_metrics": self.val_metrics,
            "best_epoch": self.best_epoch,
        }
        if include_timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d


def evaluate(model: CaveSegModel, samples: Sequence[SegmentationSample],
             ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    cm = ConfusionMatrix.zeros(model.config.num_classes)
    for s in samples:
        cm.accumulate(s.labels, model.predict(s.image), ignore_index)
    return cm


def _format_metrics(m: dict) -> str:
    return " ".join(f"{k} {m[k]:.6f}" for k in ("mIoU", "mAcc", "aAcc"))


def train(model: CaveSegModel, train_samples: Sequence[SegmentationSample],
          val_samples: Sequence[SegmentationSample] = (), config: Optional[TrainConfig] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainReport:
    """Train ``model`` in place and return the loss/metric history.

    Each epoch visits the training samples in a seeded shuffled order; one
    sample per SGD step. After every epoch the validation split (if any) is
    scored and the weights with the best validation mIoU (ties: latest epoch)
    are kept for the checkpoint; with no validation split the final weights
    are checkpointed.
    """
    config = config or TrainConfig()
    if not train_samples:
        raise ParameterError("training split is empty")
    if config.epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {config.epochs}")
    state = OptimizerState(config.learning_rate, config.momentum)
    report = TrainReport(config.seed, config.learning_rate, config.momentum)
    rng = np.random.default_rng(config.seed)
    inputs = [image_to_tensor(s.image) for s in train_samples]
    log_lines = [f"# lr {config.learning_rate!r} momentum {config.momentum!r} seed {config.seed} "
                 f"epochs {config.epochs} train {len(train_samples)} val {len(val_samples)}"]
    best_score, best_weights = -math.inf, None
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        for idx in rng.permutation(len(train_samples)):
            logits = model(inputs[idx])
            loss = T.cross_entropy(logits, train_samples[idx].labels, config.ignore_index)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch}, "
                                    f"sample {train_samples[idx].source_id!r})")
            T.backward(loss)
            sgd_step(model.weights, state)
            model.zero_grad()
            report.losses.append(value)
            log_lines.append(f"step {step} loss {value!r}")
            if on_step is not None:
                on_step(step, value)
            step += 1
        if val_samples:
            metrics = summarize(evaluate(model, val_samples, config.ignore_index))
            report.val_metrics.append(metrics)
            log_lines.append(f"epoch {epoch} val {_format_metrics(metrics)}")
            if metrics["mIoU"] >= best_score:
                best_score, report.best_epoch = metrics["mIoU"], epoch
                best_weights = {k: v.data.copy() for k, v in model.weights.items()}
        else:
            log_lines.append(f"epoch {epoch} done")
        report.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("epoch %d: %d steps, last loss %.6f", epoch, step, report.losses[-1])

    if config.log_path:
        _write_text(config.log_path, "\n".join(log_lines) + "\n")
    if config.checkpoint_path:
        snapshot = model
        if best_weights is not None:
            snapshot = CaveSegModel(model.config, {k: T.Tensor(v) for k, v in best_weights.items()})
        save_checkpoint(snapshot, config.checkpoint_path, meta={"seed": config.seed, "best_epoch": report.best_epoch})
    return report


def _write_text(path, text: str) -> None:
    tmp = f"{path}.part"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
