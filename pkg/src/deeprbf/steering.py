"""Continuous steering <-> discrete steering classes.

Class 0 is the sharpest left turn (-theta) and class n-1 the sharpest right
turn (+theta). Bins are left-closed and right-open, except that +theta itself
falls into the last class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class SteeringSpec:
    theta: float = 30.0
    n_classes: int = 10

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigError("steering.theta", "must be positive")
        if self.n_classes < 2:
            raise ConfigError("steering.n_classes", "must be >= 2")


def bin_width(spec: SteeringSpec) -> float:
    return 2.0 * spec.theta / spec.n_classes


def discretize(s, spec: SteeringSpec):
    """Map steering angle(s) in degrees to class indices, clamping out-of-range input."""
    arr = np.asarray(s, dtype=np.float64)
    if np.isnan(arr).any():
        raise InputError("steering angle is NaN")
    w = bin_width(spec)
    k = np.floor((arr + spec.theta) / w)
    # the division can land one ulp off a bin edge; settle against the edges themselves
    k = np.where(-spec.theta + (k + 1) * w <= arr, k + 1, k)
    k = np.where(-spec.theta + k * w > arr, k - 1, k)
    k = np.clip(k, 0, spec.n_classes - 1).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def class_center(k, spec: SteeringSpec):
    """Representative steering angle of class ``k``: the middle of its bin."""
    arr = np.asarray(k)
    if not np.issubdtype(arr.dtype, np.integer) or (arr < 0).any() or (arr >= spec.n_classes).any():
        raise InputError(f"class index {k!r} outside [0, {spec.n_classes})")
    c = -spec.theta + (arr + 0.5) * bin_width(spec)
    return float(c) if c.ndim == 0 else c


def bin_edges(spec: SteeringSpec) -> list[float]:
    w = bin_width(spec)
    return [-spec.theta + m * w for m in range(spec.n_classes + 1)]

