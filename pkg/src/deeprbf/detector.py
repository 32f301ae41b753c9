"""Runtime anomaly detection, threshold calibration and poisoned-sample cleaning."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rbf import predict, rejection_probability
from .steering import SteeringSpec, class_center

DEFAULT_GAMMA = 0.6
DEFAULT_BETA = 1.72


@dataclass(frozen=True)
class Thresholds:
    gamma: float = DEFAULT_GAMMA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InputError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.beta > 0:
            raise InputError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class DetectionResult:
    predicted: int
    distances: np.ndarray
    rejection: float
    anomaly: int


def _require_rbf(model):
    if getattr(model.head, "kind", None) != "rbf":
        raise InputError("detection needs a model with an RBF head")


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise InputError(f"gamma must lie in (0, 1), got {gamma}")


def rejection_scores(model, x, batch_size: int = 256):
    """``(distances, rejection probabilities)`` for a batch of images."""
    _require_rbf(model)
    phi = model.scores(x, batch_size)
    return phi, rejection_probability(phi, model.head.lam)


def decide(rejection, gamma: float):
    """Anomaly flag per sample: 1 when the rejection probability reaches ``gamma``."""
    return (np.asarray(rejection) >= gamma).astype(np.int64)


def detect(model, x, gamma: float = DEFAULT_GAMMA) -> DetectionResult:
    """Single-image detection: one forward pass, class prediction plus anomaly flag."""
    _check_gamma(gamma)
    x = np.asarray(x)
    if x.shape != model.backbone.input_shape:
        raise InputError(f"image shape {x.shape} != model input {model.backbone.input_shape}")
    phi, rej = rejection_scores(model, x[None])
    return DetectionResult(int(predict(phi[0])), phi[0], float(rej[0]), int(decide(rej[0], gamma)))


def detect_batch(model, x, gamma: float = DEFAULT_GAMMA, batch_size: int = 256) -> list:
    _check_gamma(gamma)
    phi, rej = rejection_scores(model, x, batch_size)
    pred = predict(phi)
    flags = decide(rej, gamma)
    return [DetectionResult(int(p), d, float(r), int(f)) for p, d, r, f in zip(pred, phi, rej, flags)]


def quantile(values, q: float) -> float:
    """Linearly interpolated quantile (the ``(n - 1) * q`` position of the sorted values)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InputError("cannot take a quantile of an empty set")
    if not 0.0 <= q <= 1.0:
        raise InputError(f"quantile {q} outside [0, 1]")
    return float(np.quantile(v, q, method="linear"))


def calibrate_gamma_from_scores(scores, target_fpr: float) -> float:
    if not 0.0 <= target_fpr < 1.0:
        raise InputError(f"target false-positive rate {target_fpr} outside [0, 1)")
    return quantile(scores, 1.0 - target_fpr)


def calibrate_gamma(model, clean_x, target_fpr: float = 0.05) -> float:
    """Rejection threshold admitting roughly ``target_fpr`` of clean validation images."""
    if len(clean_x) == 0:
        raise InputError("calibration set is empty")
    _, rej = rejection_scores(model, clean_x)
    return calibrate_gamma_from_scores(rej, target_fpr)


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Steer:
    degrees: float


STOP = Stop()


def control_decision(result: DetectionResult, spec: SteeringSpec):
    """Safe-stop policy: stop on an anomaly, otherwise steer to the class centre."""
    if result.anomaly:
        return STOP
    return Steer(class_center(int(result.predicted), spec))


def own_class_distances(model, x, labels, batch_size: int = 256) -> np.ndarray:
    """``phi_{y_i}(x_i)``: each sample's distance to its labelled class prototype."""
    _require_rbf(model)
    labels = np.asarray(labels)
    c = model.head.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels outside [0, {c})")
    phi = model.scores(x, batch_size)
    return phi[np.arange(len(labels)), labels]


def flag_by_distance(distances, beta: float) -> np.ndarray:
    if not beta > 0:
        raise InputError(f"beta must be positive, got {beta}")
    return np.asarray(distances) >= beta


def clean_dataset(model, x, labels, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Flag training samples whose own-class distance reaches ``beta`` as poisoned."""
    return flag_by_distance(own_class_distances(model, x, labels), beta)


def calibrate_beta(model, x, labels, q: float = 0.95) -> float:
    if len(labels) == 0:
        raise InputError("calibration set is empty")
    return quantile(own_class_distances(model, x, labels), q)


def detection_records(results, ids=None) -> str:
    """Line-delimited JSON records: sample id, class, rejection probability, flag."""
    lines = []
    for i, r in enumerate(results):
        rec = {
            "id": int(ids[i]) if ids is not None else i,
            "class": int(r.predicted),
            "rejection": float(r.rejection),
            "flag": int(r.anomaly),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def flag_records(flags, scores=None) -> str:
    """Same record format for cleaning output; ``class`` is omitted, ``score`` optional."""
    lines = []
    for i, f in enumerate(flags):
        rec = {"id": i, "flag": int(f)}
        if scores is not None:
            rec["score"] = float(scores[i])
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
