"""Regression losses, Adam, the deterministic epoch loop and MAE evaluation."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import stack
from .errors import InvalidInputError, TrainingError
from .models import build_model
from .rng import SplitMix64, derive_seed, shuffle

LOSSES = ("mse", "mae", "huber", "logcosh")
LOG2 = math.log(2.0)


def loss_values(loss, e, delta=1.0):
    """Elementwise loss of residuals ``e = pred - target``."""
    a = np.abs(e)
    if loss == "mse":
        return e * e
    if loss == "mae":
        return a
    if loss == "huber":
        return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    if loss == "logcosh":
        # log(cosh e) without overflow for large |e|
        return a + np.log1p(np.exp(-2.0 * a)) - LOG2
    raise InvalidInputError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def loss_grads(loss, e, delta=1.0):
    """Elementwise derivative of :func:`loss_values` with respect to the prediction."""
    if loss == "mse":
        return 2.0 * e
    if loss == "mae":
        return np.sign(e)
    if loss == "huber":
        return np.clip(e, -delta, delta)
    if loss == "logcosh":
        return np.tanh(e)
    raise InvalidInputError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def loss_and_grad(loss, pred, target, delta=1.0):
    if not (math.isfinite(pred) and math.isfinite(target)):
        raise InvalidInputError("loss inputs must be finite")
    if delta <= 0:
        raise InvalidInputError("huber delta must be positive")
    e = np.float64(pred - target)
    return float(loss_values(loss, e, delta)), float(loss_grads(loss, e, delta))


class Adam:
    """Adam with bias-corrected moments; updates parameter arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainingConfig:
    dataset: str = "synthetic"
    task: str = "hr"
    arch: str = "fcn"
    loss: str = "logcosh"
    epochs: int = 125
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    huber_delta: float = 1.0
    fractions: tuple = (0.8, 0.04, 0.16)
    seed: int = 1400
    window_s: float = 10.0
    hop_s: float = 1.0

    def validate(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.huber_delta <= 0:
            raise InvalidInputError("huber_delta must be positive")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise InvalidInputError(f"fractions {self.fractions} must be three values summing to 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: int = -1
    test_mae: float = math.nan

    def to_csv(self):
        lines = ["epoch,train_loss,val_mae"]
        for i, (tl, vm) in enumerate(zip(self.train_loss, self.val_mae), start=1):
            lines.append(f"{i},{tl!r},{vm!r}")
        lines.append(f"test_mae={self.test_mae!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = text.strip().splitlines()
        if not lines or lines[0] != "epoch,train_loss,val_mae":
            raise ValueError("not a training history file")
        hist = cls()
        for line in lines[1:]:
            if line.startswith("test_mae="):
                hist.test_mae = float(line.split("=", 1)[1])
                continue
            _, tl, vm = line.split(",")
            hist.train_loss.append(float(tl))
            hist.val_mae.append(float(vm))
        finite = [v for v in hist.val_mae if not math.isnan(v)]
        if finite:
            hist.best_epoch = hist.val_mae.index(min(finite))
        return hist


def evaluate(model, examples):
    """Mean absolute error of the model's predictions (inference mode)."""
    if not examples:
        return math.nan
    x, y = stack(examples)
    return float(np.mean(np.abs(model.predict_batch(x) - y)))


def _snapshot(model):
    return [a.copy() for a in model.parameters() + model.buffers()]


def _restore(model, snap):
    for a, s in zip(model.parameters() + model.buffers(), snap):
        a[...] = s


def epoch_order(n, seed, epoch):
    """Example order for one epoch: Fisher-Yates with a per-epoch SplitMix64 stream."""
    return shuffle(list(range(n)), SplitMix64(derive_seed(seed, epoch)))


def train(config, train_examples, val_examples=(), test_examples=(), log=None):
    """Fit a freshly initialised model; return the best-validation weights and history."""
    config.validate()
    if not train_examples:
        raise TrainingError("training split is empty")
    x_train, y_train = stack(train_examples)
    model = build_model(config.arch, config.task, x_train.shape[2], init_seed=config.seed)
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    hist = TrainHistory()
    best_mae, best = math.inf, _snapshot(model)
    n = len(y_train)
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = np.array(epoch_order(n, config.seed, epoch))
        total = 0.0
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            pred = model.forward(x_train[idx], train=True)
            e = pred - y_train[idx]
            batch_loss = float(np.mean(loss_values(config.loss, e, config.huber_delta)))
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            total += batch_loss * len(idx)
            model.backward(loss_grads(config.loss, e, config.huber_delta) / len(idx))
            opt.step(model.gradients())
        model.clear_tape()
        hist.train_loss.append(total / n)
        val_mae = evaluate(model, list(val_examples))
        hist.val_mae.append(val_mae)
        # without a validation split the last epoch is kept
        if math.isnan(val_mae) or val_mae < best_mae:
            best_mae = val_mae if not math.isnan(val_mae) else best_mae
            best = _snapshot(model)
            hist.best_epoch = epoch
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} train_loss={total / n:.4f} val_mae={val_mae:.4f}")
    _restore(model, best)
    hist.test_mae = evaluate(model, list(test_examples))
    return model, hist
