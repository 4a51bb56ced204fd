"""Noise-prediction training: the simple MSE objective, label dropout, AdamW."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, TextIO

import numpy as np

from . import tensor as tn
from .data import Batch
from .errors import ConfigError, NumericError
from .optim import OptimizerState, adamw_step, zero_grad
from .rng import Rng
from .schedule import ScheduleTable, add_noise
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    num_epochs: int = 480
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 42
    label_dropout_prob: float = 0.1
    log_every: int = 1
    max_steps: Optional[int] = None

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.label_dropout_prob < 1.0:
            raise ConfigError(f"label_dropout_prob must lie in [0, 1), got {self.label_dropout_prob}")
        if self.num_epochs < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("num_epochs, batch_size and log_every must be positive")


def sample_timesteps(rng: Rng, batch_size: int, T: int) -> np.ndarray:
    """I.i.d. uniform integer timesteps in [0, T-1]."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    return rng.integers(0, T, batch_size)


def drop_labels(labels: np.ndarray, null_class: int, p: float, rng: Rng) -> np.ndarray:
    """Replace each label by the null class with probability ``p``."""
    labels = np.asarray(labels, dtype=np.int64)
    if p <= 0:
        return labels.copy()
    return np.where(rng.bernoulli(p, labels.shape), null_class, labels)


def compute_loss(model, table: ScheduleTable, batch: Batch, rng: Rng,
                 label_dropout_prob: float = 0.0, train: bool = True) -> Tensor:
    """Mean squared error between injected noise and the model's prediction.

    Draw order from ``rng``: timesteps, noise, label-dropout mask, dropout.
    """
    x0 = batch.images
    n = x0.shape[0]
    t = sample_timesteps(rng.child(0), n, table.num_train_timesteps)
    noise = Tensor(rng.child(1).normal(x0.shape), dtype=x0.dtype)
    x_t = add_noise(table, x0, noise, t)
    labels = None
    num_classes = getattr(getattr(model, "cfg", None), "num_classes", 0)
    if num_classes > 0:
        if batch.labels is None:
            raise ConfigError("class-conditional model needs labelled batches")
        labels = drop_labels(batch.labels, num_classes - 1, label_dropout_prob, rng.child(2))
    pred = model(x_t, t, labels, rng.child(3) if train else None)
    return tn.mse(pred, noise)


def train_step(model, opt: OptimizerState, table: ScheduleTable, batch: Batch,
               cfg: TrainConfig, rng: Rng) -> float:
    """One optimizer update; returns the loss measured before the update."""
    zero_grad(model.params)
    loss = compute_loss(model, table, batch, rng, cfg.label_dropout_prob)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(
            f"non-finite loss {value} at optimizer step {opt.step + 1}; "
            f"batch mean {float(np.mean(batch.images.data)):.4g}, "
            f"max |param| {max(float(np.abs(p.data).max()) for p in model.params.values()):.4g}"
        )
    loss.backward()
    adamw_step(model.params, opt)
    return value


def train(model, data_loader: Callable[[int], Iterable[Batch]], cfg: TrainConfig,
          table: ScheduleTable, log_file: Optional[TextIO] = None,
          opt: Optional[OptimizerState] = None, on_record: Optional[Callable[[dict], None]] = None):
    """Run ``num_epochs`` passes over ``data_loader(epoch)``.

    Returns ``(model, opt, records)``; each record is also written as a JSON
    line to ``log_file`` when one is given.
    """
    cfg.validate()
    if opt is None:
        opt = OptimizerState.for_params(
            model.params, learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
    records: list[dict] = []
    root = Rng(cfg.seed, 0xD1F)

    def emit(record: dict) -> None:
        records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if on_record is not None:
            on_record(record)

    for epoch in range(cfg.num_epochs):
        logger.info("Starting epoch %d...", epoch)
        losses = []
        for batch in data_loader(epoch):
            if cfg.max_steps is not None and opt.step >= cfg.max_steps:
                break
            loss = train_step(model, opt, table, batch, cfg, root.child(opt.step))
            losses.append(loss)
            if opt.step % cfg.log_every == 0:
                emit({"step": opt.step, "epoch": epoch, "loss": loss, "lr": opt.learning_rate})
        if not losses:
            if epoch == 0:
                raise ConfigError("data loader produced no batches")
            break
        mean_loss = float(np.mean(losses))
        emit({"step": opt.step, "epoch": epoch, "loss": mean_loss, "lr": opt.learning_rate,
              "kind": "epoch"})
        logger.info("Epoch %d complete with loss %.6f.", epoch, mean_loss)
    return model, opt, records
