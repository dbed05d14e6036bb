"""Weighted cross entropy, Adam with exponential decay, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Model
from .pipeline import PreparedSample, shuffle_epoch
from .tensor import Tensor, no_grad, softmax_array

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "pa", "mpa", "miou", "dca")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    class_weights: tuple = (100.0, 100.0, 2000.0)
    lr0: float = 0.0008
    lr_decay_per_epoch: float = 0.97
    weight_decay: float = 0.0005
    epochs: int = 200
    batch_size: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    mask_background_loss: bool = False
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be three positive numbers")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay_per_epoch**epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def weighted_cross_entropy(probabilities, onehot: np.ndarray, weights, mask_background: bool = False):
    """Mean over pixels of ``w[true] * -ln p[true]``.

    Returns ``(loss, grad)`` where ``grad`` is the gradient with respect to the
    *logits* that produced ``probabilities`` through a pixelwise softmax:
    ``w[true] * (p - y) / pixel_count``.
    """
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    y = np.asarray(onehot)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {p.shape} and one-hot labels {y.shape} differ in shape")
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1, 1, 1)
    pixel_w = (w * y).sum(axis=1, keepdims=True)
    if mask_background:
        keep = 1.0 - y[:, :1]
        pixel_w = pixel_w * keep
        count = max(float(keep.sum()), 1.0)
    else:
        count = float(p.shape[0] * p.shape[2] * p.shape[3])
    p_true = (p.astype(np.float64) * y).sum(axis=1, keepdims=True)
    loss = float((pixel_w * -np.log(np.maximum(p_true, LOG_CLAMP))).sum() / count)
    grad = (pixel_w * (p - y) / count).astype(p.dtype)
    return loss, grad


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0


def adam_step(params: dict[str, Tensor], state: OptimizerState, config: TrainConfig, lr: float | None = None) -> None:
    """One bias-corrected Adam update over every parameter that has a gradient.

    Weight decay (``config.weight_decay * theta``) is added to the gradient
    of conv weights only (names ending in ``.weight``).
    """
    if lr is not None:
        state.lr = lr
    state.step += 1
    t = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        dtype = p.data.dtype
        g = p.grad
        if config.weight_decay and name.endswith(".weight"):
            g = g + dtype.type(config.weight_decay) * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= dtype.type(b1)
        m += dtype.type(1.0 - b1) * g
        v *= dtype.type(b2)
        v += dtype.type(1.0 - b2) * (g * g)
        mhat = m / dtype.type(c1)
        vhat = v / dtype.type(c2)
        p.data -= dtype.type(state.lr) * mhat / (np.sqrt(vhat) + dtype.type(eps))


def stack_batch(batch: list[PreparedSample]) -> tuple[Tensor, np.ndarray]:
    if len(batch) == 1:
        return batch[0].image, batch[0].onehot
    return (Tensor(np.concatenate([s.image.data for s in batch], axis=0)),
            np.concatenate([s.onehot for s in batch], axis=0))


def evaluate_set(model: Model, samples: list[PreparedSample], weights, mask_background: bool = False):
    """Inference-mode loss and pooled confusion matrix over ``samples``."""
    from .evaluation import confusion

    total = np.zeros((3, 3), dtype=np.int64)
    losses = []
    with no_grad():
        for s in samples:
            probs = model.forward(s.image, "inference")
            loss, _ = weighted_cross_entropy(probs, s.onehot, weights, mask_background)
            losses.append(loss)
            total += confusion(probs.data.argmax(axis=1)[0], s.labels).counts
    return float(np.mean(losses)) if losses else float("nan"), total


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    optimizer: OptimizerState
    epochs_done: int


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: Model,
    train_set: list[PreparedSample],
    val_set: list[PreparedSample] | None,
    config: TrainConfig,
    callbacks=(),
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Train ``model`` in place for epochs ``start_epoch .. config.epochs - 1``.

    Each epoch shuffles the training set with a seed derived from
    ``(config.seed, epoch)``, so resuming from a checkpoint written after
    epoch k reproduces the uninterrupted run exactly.
    Callbacks are called as ``cb(epoch, record, model)`` after each evaluation;
    one returning True ends training after that epoch.
    """
    from .evaluation import metrics

    if not train_set:
        raise TrainingError("training set is empty")
    shapes = {s.image.shape[1:] for s in train_set}
    if len(shapes) != 1 and config.batch_size > 1:
        raise TrainingError(f"batching needs equally sized samples, got shapes {sorted(shapes)}")
    optimizer = optimizer or OptimizerState()
    params = model.parameters()
    history: list[dict] = []
    step_in_run = 0

    for epoch in range(start_epoch, config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle_epoch(train_set, epoch_seed(config.seed, epoch))
        losses, stop = [], []
        for b in range(0, len(order), config.batch_size):
            x, y = stack_batch(order[b:b + config.batch_size])
            model.zero_grad()
            logits = model.logits(x, "training")
            probs = softmax_array(logits.data)
            loss, grad = weighted_cross_entropy(probs, y, config.class_weights, config.mask_background_loss)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, step {optimizer.step + 1} "
                    f"(batch starting at position {b} of the shuffled epoch)"
                )
            logits.backward(grad)
            adam_step(params, optimizer, config, lr)
            losses.append(loss)
            step_in_run += 1
        model.zero_grad()

        last = epoch == config.epochs - 1
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or last):
            record = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
            if val_set:
                val_loss, cm = evaluate_set(model, val_set, config.class_weights, config.mask_background_loss)
                rep = metrics(cm, allow_empty=True)
                record.update({"val_loss": val_loss, "pa": rep.pixel_accuracy, "mpa": rep.mean_pixel_accuracy,
                               "miou": rep.mean_iou, "dca": rep.defect_class_accuracy})
            else:
                record.update({"val_loss": None, "pa": None, "mpa": None, "miou": None, "dca": None})
            record = {k: record[k] for k in HISTORY_FIELDS}
            history.append(record)
            log.info("epoch %d lr %.3g loss %.4f val %s", epoch + 1, lr, record["train_loss"], record["dca"])
            stop = [cb(epoch + 1, record, model) for cb in callbacks]

        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            from .persistence import save_training_checkpoint

            save_training_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.ckpt", model, optimizer,
                                     epoch + 1, config)
        if any(s is True for s in stop):
            return TrainResult(model=model, history=history, optimizer=optimizer, epochs_done=epoch + 1)

    return TrainResult(model=model, history=history, optimizer=optimizer, epochs_done=max(start_epoch, config.epochs))
