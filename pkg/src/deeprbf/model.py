"""Backbone + head container and the minibatch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .numeric import (
    DTYPE,
    Network,
    OptimizerState,
    backward,
    forward,
    init_parameters,
    optimizer_step,
)
from .rbf import RbfHead, init_prototypes

logger = logging.getLogger(__name__)

_CONV_KINDS = ("conv2d", "residual-block")


def validate_architecture(backbone: Network, head_kind: str) -> None:
    """Reject backbones that cannot feed an RBF head.

    With an RBF head the last backbone layer must be tanh, and no dense layer
    may follow the last convolutional block.
    """
    if head_kind != "rbf":
        return
    kinds = [layer.kind for layer in backbone.layers]
    if not kinds or kinds[-1] != "tanh":
        raise ConfigError("backbone", "an RBF head must be fed directly by a tanh layer")
    conv_idx = [i for i, k in enumerate(kinds) if k in _CONV_KINDS]
    if conv_idx and "dense" in kinds[conv_idx[-1] :]:
        raise ConfigError(
            "backbone", "dense layers between the last conv block and the RBF head are not allowed"
        )
    if len(backbone.output_shape) != 1:
        raise ConfigError("backbone", f"backbone output must be flat, got {backbone.output_shape}")


class Model:
    """A backbone network feeding either an :class:`RbfHead` or a softmax head."""

    def __init__(self, backbone: Network, head):
        validate_architecture(backbone, head.kind)
        if backbone.output_shape != (head.dim,):
            raise ConfigError(
                "head", f"head dim {head.dim} != backbone output {backbone.output_shape}"
            )
        self.backbone = backbone
        self.head = head

    def features(self, x, batch_size: int = 256) -> np.ndarray:
        """Feature vectors ``f(x)`` entering the head (the penultimate activations)."""
        x = np.asarray(x)
        if x.shape[1:] != self.backbone.input_shape:
            raise InputError(
                f"input shape {x.shape[1:]} != model input {self.backbone.input_shape}"
            )
        return backbone_features(self.backbone, x, batch_size)

    def scores(self, x, batch_size: int = 256) -> np.ndarray:
        """Distances (RBF head) or logits (softmax head), one row per sample."""
        return self.head.scores(self.features(x, batch_size))

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return self.head.predict_from_features(self.features(x, batch_size))

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def named_parameters(self):
        return list(self.backbone.named_parameters()) + list(self.head.named_parameters())

    def parameters(self) -> list:
        return [a for _, a in self.named_parameters()]

    def set_parameters(self, arrays) -> None:
        arrays = list(arrays)
        pos = 0
        for p in self.backbone.params:
            for name in sorted(p):
                p[name] = arrays[pos]
                pos += 1
        self.head.set_parameters(arrays[pos:])

    def copy_parameters(self) -> list:
        return [a.copy() for a in self.parameters()]


def backbone_features(backbone: Network, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x)
    out = [forward(backbone, x[i : i + batch_size]).output for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0,) + backbone.output_shape, dtype=DTYPE)
    return np.concatenate(out, axis=0)


def build_rbf_model(backbone: Network, num_classes: int, seed: int, x=None, y=None, lam=1.0):
    """Initialise backbone weights and class-mean prototypes from ``(x, y)``."""
    backbone.params = init_parameters(backbone, seed)
    feats = labels = None
    if x is not None and len(x):
        idx = _per_class_rows(np.asarray(y), num_classes, 100)
        if idx.size:
            feats = backbone_features(backbone, np.asarray(x)[idx])
            labels = np.asarray(y)[idx]
    W = init_prototypes(num_classes, backbone.output_shape[0], feats, labels, seed=seed + 1)
    return Model(backbone, RbfHead(W, lam=lam))


def _per_class_rows(y, num_classes, limit):
    rows = [np.flatnonzero(y == k)[:limit] for k in range(num_classes)]
    return np.sort(np.concatenate(rows)) if rows else np.zeros(0, dtype=int)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    lr: float = 1e-3
    patience: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer", f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0


class TrainingDiverged(NumericError):
    def __init__(self, epoch, batch, detail):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


def train(model: Model, x, y, config: TrainConfig, val=None, on_epoch=None) -> TrainResult:
    """Minibatch training of backbone and head on the head's own loss.

    The loss is summed over each batch. Shuffling uses a generator seeded from
    ``config.seed`` so identical inputs give identical parameters. When
    ``val=(x_val, y_val)`` is given and ``config.patience > 0``, training stops
    after ``patience`` epochs without a validation-accuracy improvement and the
    best parameters are restored. ``on_epoch(entry)`` sees every log entry as
    soon as it is produced.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise InputError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    c = model.head.num_classes
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InputError(f"labels must be class indices in [0, {c})")
    result = TrainResult()
    if config.epochs == 0 or x.shape[0] == 0:
        return result

    rng = np.random.default_rng(config.seed)
    state = OptimizerState(kind=config.optimizer, lr=config.lr)
    n = x.shape[0]
    best_val, best_params, since_best = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            try:
                record = forward(model.backbone, x[idx])
            except NumericError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from None
            feats = record.output
            loss, dfeat, hgrads = model.head.loss_and_grad(feats, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, f"loss={loss}")
            correct += int(np.sum(model.head.predict_from_features(feats) == y[idx]))
            total += loss
            bgrads, _ = backward(model.backbone, record, dfeat)
            grads = [g[name] for g in bgrads for name in sorted(g)]
            grads += [hgrads[name.split(".", 1)[1]] for name, _ in model.head.named_parameters()]
            params, state = optimizer_step(model.parameters(), grads, state)
            model.set_parameters(params)
        entry = {"epoch": epoch, "loss": total / n, "train_accuracy": correct / n}
        if val is not None:
            entry["val_accuracy"] = model.accuracy(*val)
        result.log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        logger.info("epoch %d %s", epoch, entry)
        result.stopped_epoch = epoch
        if val is not None and config.patience > 0:
            if entry["val_accuracy"] > best_val:
                best_val, since_best = entry["val_accuracy"], 0
                best_params = model.copy_parameters()
                result.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if best_params is not None:
        model.set_parameters(best_params)
    else:
        result.best_epoch = result.stopped_epoch
    return result


def build_model(head: str, backbone: Network, num_classes: int, seed: int, x=None, y=None, lam=1.0):
    """Fresh model with either head on ``backbone``; both heads get identical backbone weights for equal seeds."""
    if head == "rbf":
        return build_rbf_model(backbone, num_classes, seed, x, y, lam)
    if head == "softmax":
        from .baselines import SoftmaxHead

        backbone.params = init_parameters(backbone, seed)
        return Model(backbone, SoftmaxHead.init(backbone.output_shape[0], num_classes, seed + 1))
    raise ConfigError("head", f"unknown head {head!r}")
