"""Cross-entropy, SGD with momentum, and the epoch loop with best-model selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DISABLED, AugmentConfig, ImageSample, augment, derive_seed
from .models import Model
from .tensor import Tensor


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (log-sum-exp form)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])

    def fn(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return T._record("cross_entropy", np.asarray(loss), (logits,), fn)


@dataclass
class OptimizerState:
    velocities: list

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_momentum_step(params, grads, state: OptimizerState, lr: float, mu: float) -> None:
    """In place: ``v <- mu * v + g``; ``w <- w - lr * v``."""
    if not (len(params) == len(grads) == len(state.velocities)):
        raise ValueError(
            f"{len(params)} params, {len(grads)} grads, {len(state.velocities)} velocities"
        )
    for p, g, v in zip(params, grads, state.velocities):
        if p.shape != np.shape(g) or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, velocity {v.shape}")
        v *= mu
        v += g
        p.data -= lr * v


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    global_seed: int = 0
    augment: AugmentConfig = DISABLED

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "global_seed": self.global_seed,
            "augment": self.augment.to_dict(),
            "selection_metric": "validation_accuracy",
        }


def stack_batch(samples) -> tuple:
    x = np.stack([s.pixels for s in samples])
    y = np.array([s.label_index for s in samples], dtype=np.int64)
    return x, y


def train_epoch(model: Model, samples, config: TrainConfig, epoch: int, state: OptimizerState) -> tuple:
    """One shuffled pass with an optimizer step per mini-batch.

    Returns the sample-weighted mean loss and the accuracy, both measured on
    the forward passes that produced each step.
    """
    if not samples:
        raise ValueError("empty training set")
    order = np.random.default_rng(derive_seed(config.global_seed, "shuffle", epoch)).permutation(len(samples))
    params = model.parameters()
    total_loss = 0.0
    correct = 0
    for start in range(0, len(samples), config.batch_size):
        batch = [samples[i] for i in order[start : start + config.batch_size]]
        if config.augment.enabled:
            batch = [augment(s, config.augment, epoch, config.global_seed) for s in batch]
        x, y = stack_batch(batch)
        logits = model.forward(Tensor(x))
        loss = cross_entropy(logits, y)
        T.backward(loss)
        sgd_momentum_step(params, [p.grad for p in params], state, config.learning_rate, config.momentum)
        total_loss += loss.item() * len(batch)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / len(samples), correct / len(samples)


def evaluate_loss(model: Model, samples, batch_size: int = 64) -> tuple:
    """Mean cross-entropy and accuracy without augmentation or graph recording."""
    total = 0.0
    correct = 0
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            x, y = stack_batch(samples[start : start + batch_size])
            logits = model.forward(Tensor(x))
            total += cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return total / len(samples), correct / len(samples)


def best_epoch(val_accuracies) -> int:
    """Index of the highest validation accuracy; the earliest wins ties."""
    return int(np.argmax(val_accuracies))


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def fit(model: Model, train_samples, val_samples, config: TrainConfig, log=None) -> TrainReport:
    """Train for ``config.epochs`` and leave the best-validation snapshot loaded in ``model``."""
    config.validate()
    if not train_samples or not val_samples:
        raise ValueError("fit needs non-empty training and validation sets")
    state = OptimizerState.zeros_like(model.parameters())
    report = TrainReport()
    best_acc = -1.0
    for epoch in range(config.epochs):
        loss, acc = train_epoch(model, train_samples, config, epoch, state)
        val_loss, val_acc = evaluate_loss(model, val_samples)
        report.train_loss.append(loss)
        report.train_accuracy.append(acc)
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            report.best_epoch = epoch
            report.best_state = model.state_dict()
        if log is not None:
            log(f"epoch {epoch:3d}  loss {loss:.4f}  acc {acc:.3f}  val_loss {val_loss:.4f}  val_acc {val_acc:.3f}")
    model.load_state_dict(report.best_state)
    return report
