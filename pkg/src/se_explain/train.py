"""SGD with momentum and weight decay, training loop and evaluation."""
from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DatasetSplit, augment_batch
from .model import ModelGraph, backward, forward
from .tensor import ShapeError, softmax_cross_entropy


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    dataset: str = "cifar10"
    se_enabled: bool = True
    subset_fraction: float = 1.0
    augment: bool = True

    def __post_init__(self):
        for name in ("lr", "momentum", "weight_decay"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ValueError("subset_fraction must be in (0, 1]")


def sgd_step(params, grads, velocity, cfg):
    """In place: ``v = momentum * v + grad + wd * p`` then ``p -= lr * v``."""
    if len(params) != len(grads) or len(params) != len(velocity):
        raise ShapeError("params, grads and velocity differ in length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {p.shape} vs grad {g.shape} vs velocity {v.shape}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= cfg.lr * v
    return params, velocity


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_acc"])
            for i, (loss, acc) in enumerate(zip(self.train_loss, self.test_accuracy), start=1):
                w.writerow([i, repr(loss), repr(acc)])


def evaluate(model: ModelGraph, split: DatasetSplit, batch_size=256, logits_fn=None) -> float:
    """Top-1 accuracy in dataset order, no augmentation."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    for images, labels in split.batches(batch_size):
        logits = forward(model, images).logits if logits_fn is None else logits_fn(images)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return correct / len(split)


def subset_indices(n, fraction, seed):
    if fraction >= 1.0:
        return np.arange(n)
    k = max(1, math.ceil(fraction * n))
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def train(model: ModelGraph, train_split: DatasetSplit, cfg: TrainConfig,
          test_split: Optional[DatasetSplit] = None,
          progress: Optional[Callable[[str], None]] = None, set_stats=True):
    """Train ``model`` in place and return ``(model, history)``.

    Data order, augmentation and subset choice all derive from ``cfg.seed``.
    When ``set_stats`` is true the model's input normalisation is fitted to
    the training images first.
    """
    if len(train_split) == 0:
        raise ValueError("training split is empty")
    if progress is None:
        progress = lambda line: print(line, file=sys.stdout, flush=True)
    rng = np.random.default_rng(cfg.seed)
    train_split = train_split.subset(subset_indices(len(train_split), cfg.subset_fraction, cfg.seed))
    if test_split is not None and cfg.subset_fraction < 1.0:
        test_split = test_split.subset(subset_indices(len(test_split), cfg.subset_fraction, cfg.seed + 1))
    if set_stats:
        mean, std = train_split.channel_stats()
        model.mean = mean.astype(np.float32)
        model.std = np.maximum(std, 1e-3).astype(np.float32)

    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    history = History()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_split))
        losses = []
        for images, labels in train_split.batches(cfg.batch_size, order):
            if cfg.augment:
                images = augment_batch(images, rng)
            res = forward(model, images, keep_caches=True)
            loss, dlogits = softmax_cross_entropy(res.logits.astype(np.float64), labels)
            grads = backward(model, res, dlogits.astype(np.float32))
            sgd_step(params, grads, velocity, cfg)
            losses.append(loss)
        history.batch_losses.append(losses)
        history.train_loss.append(float(np.mean(losses)))
        acc = evaluate(model, test_split) if test_split is not None else float("nan")
        history.test_accuracy.append(acc)
        progress(f"epoch={epoch} loss={history.train_loss[-1]:.6f} test_acc={acc:.6f}")
    model.metadata.update(
        epochs=cfg.epochs, seed=cfg.seed, final_accuracy=repr(history.test_accuracy[-1]),
        lr=repr(cfg.lr), momentum=repr(cfg.momentum), weight_decay=repr(cfg.weight_decay),
        dataset=cfg.dataset, subset_fraction=repr(cfg.subset_fraction),
    )
    return model, history
