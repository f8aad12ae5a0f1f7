"""Mini-batch SGD with momentum and softmax cross-entropy."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .models import Model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    lr_milestones: tuple[int, ...] = (20,)
    lr_gamma: float = 0.1
    hflip: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0, momentum in [0, 1)")
        self.lr_milestones = tuple(self.lr_milestones)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)

    def rows(self):
        return list(zip(self.epoch, self.loss, self.train_acc, self.test_acc))


def softmax_cross_entropy(logits, labels):
    """Mean loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def predict(model: Model, images, batch: int = 256) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return model.forward(images, batch).argmax(axis=1)


def evaluate_accuracy(model: Model, dataset: Dataset, batch: int = 256) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(model, dataset.images, batch) == dataset.labels).mean())


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          test: Dataset | None = None) -> tuple[Model, History]:
    """Train a copy of ``model``; the input model is not modified.

    The run is a pure function of (model, dataset, cfg): shuffling and flips
    come from ``cfg.seed``. A non-finite loss raises :class:`TrainingDiverged`.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    classes = model.spec.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= classes:
        raise ValueError(f"labels span [{dataset.labels.min()}, {dataset.labels.max()}] "
                         f"but the head has {classes} classes")
    if tuple(dataset.images.shape[1:]) != tuple(model.spec.input_shape):
        raise ValueError(f"images {dataset.images.shape[1:]} do not match model input "
                         f"{model.spec.input_shape}")
    model = model.copy()
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    tape = model.tape()
    hist = History()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            logits = tape.forward(x)
            loss, g = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start}")
            tape.backward(g)
            for name, p in params.items():
                grad = tape.param_grads[name]
                if cfg.weight_decay and name.endswith(".weight"):
                    grad = grad + cfg.weight_decay * p
                velocity[name] = cfg.momentum * velocity[name] + grad
                p -= lr * velocity[name]
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        hist.epoch.append(epoch)
        hist.loss.append(total_loss / n)
        hist.train_acc.append(correct / n)
        hist.test_acc.append(evaluate_accuracy(model, test) if test is not None else float("nan"))
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, hist.loss[-1],
                 hist.train_acc[-1], hist.test_acc[-1])
    return model, hist
