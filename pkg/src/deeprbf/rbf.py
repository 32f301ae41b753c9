"""Radial-basis output head with a rejection class.

Each class k owns a prototype vector W_k. For a feature vector f the head
produces one distance per class,

    phi_k = || A^T (f - W_k) + b ||_p ** p

which reduces to the squared Euclidean distance ``sum((f - W_k)**2)`` when
``A`` is the identity, ``b`` is zero and ``p == 2`` (the default, and the only
mode whose prototypes are trained here). Distances feed the SoftML loss, the
per-class scores and the probability that the input belongs to no class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, ShapeError

logger = logging.getLogger(__name__)


def softplus(z):
    """``log(1 + exp(z))`` without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def rbf_unit(x, A, b, p: float = 2.0) -> float:
    """A single RBF unit: ``(||A^T x + b||_p) ** p``."""
    u = np.asarray(A, dtype=np.float64).T @ np.asarray(x, dtype=np.float64) + b
    return float(np.sum(np.abs(u) ** p))


@dataclass
class RbfHead:
    prototypes: np.ndarray
    lam: float = 1.0
    p: float = 2.0
    projection: np.ndarray | None = None
    offset: np.ndarray | None = None
    kind = "rbf"

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ShapeError(f"prototypes must be c x d with c >= 1, got {self.prototypes.shape}")
        if not self.lam > 0:
            raise InputError(f"margin lambda must be positive, got {self.lam}")
        if not self.p >= 1:
            raise InputError(f"exponent p must be >= 1, got {self.p}")
        if not np.isfinite(self.prototypes).all():
            raise NumericError("prototype entries must be finite")
        d = self.prototypes.shape[1]
        if self.projection is not None:
            self.projection = np.asarray(self.projection, dtype=np.float64)
            if self.projection.ndim != 2 or self.projection.shape[0] != d:
                raise ShapeError(f"projection must be {d} x l, got {self.projection.shape}")
        if self.offset is not None:
            self.offset = np.asarray(self.offset, dtype=np.float64)
            width = self.projection.shape[1] if self.projection is not None else d
            if self.offset.shape != (width,):
                raise ShapeError(f"offset must have length {width}, got {self.offset.shape}")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def euclidean(self) -> bool:
        return self.projection is None and self.offset is None and self.p == 2.0

    # --- model head protocol -------------------------------------------------

    def scores(self, features):
        return rbf_distances(features, self)

    def predict_from_features(self, features):
        return predict(rbf_distances(features, self))

    def loss_and_grad(self, features, labels):
        phi = rbf_distances(features, self)
        loss = softml_loss(phi, labels, self.lam)
        dphi = softml_grad(phi, labels, self.lam)
        dfeat, dproto = rbf_distance_backward(features, self, dphi)
        return loss, dfeat, {"prototypes": dproto}

    def named_parameters(self):
        return [("head.prototypes", self.prototypes)]

    def set_parameters(self, arrays):
        (self.prototypes,) = arrays

    def describe(self) -> dict:
        return {
            "kind": "rbf",
            "num_classes": self.num_classes,
            "dim": self.dim,
            "lam": self.lam,
            "p": self.p,
            "projection": None if self.projection is None else list(self.projection.shape),
            "offset": None if self.offset is None else list(self.offset.shape),
        }

    def extra_arrays(self):
        """Non-trained arrays that must survive a checkpoint round trip."""
        out = []
        if self.projection is not None:
            out.append(("head.projection", self.projection))
        if self.offset is not None:
            out.append(("head.offset", self.offset))
        return out


def _check_features(features, head):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[None]
    if f.ndim != 2 or f.shape[1] != head.dim:
        raise ShapeError(f"features of shape {f.shape} do not match prototype dim {head.dim}")
    return f


def _projected(f, head):
    diff = f[:, None, :] - head.prototypes[None, :, :]
    u = diff if head.projection is None else diff @ head.projection
    if head.offset is not None:
        u = u + head.offset
    return u


def rbf_distances(features, head: RbfHead) -> np.ndarray:
    """Distance of every feature row to every prototype, shape N x c (c for a single row)."""
    f = _check_features(features, head)
    if head.euclidean:
        diff = f[:, None, :] - head.prototypes[None, :, :]
        phi = np.einsum("nkd,nkd->nk", diff, diff)
    else:
        phi = np.sum(np.abs(_projected(f, head)) ** head.p, axis=2)
    return phi[0] if np.ndim(features) == 1 else phi


def rbf_distance_backward(features, head: RbfHead, dphi):
    """Chain ``dJ/dphi`` (N x c) into ``(dJ/dfeatures, dJ/dprototypes)``."""
    f = _check_features(features, head)
    dphi = np.asarray(dphi, dtype=np.float64)
    if head.euclidean:
        diff = f[:, None, :] - head.prototypes[None, :, :]
        g = 2.0 * dphi[:, :, None] * diff
        return g.sum(axis=1), -g.sum(axis=0)
    u = _projected(f, head)
    # d|u|^p/du is zero at u == 0 for every p >= 1
    if head.p == 1.0:
        du = np.sign(u)
    else:
        du = head.p * np.abs(u) ** (head.p - 1.0) * np.sign(u)
    g = dphi[:, :, None] * du
    if head.projection is not None:
        g = g @ head.projection.T
    return g.sum(axis=1), -g.sum(axis=0)


# ---------------------------------------------------------------------------
# loss and probabilities


def _as_batch(phi, y=None):
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    phi2 = phi[None] if single else phi
    if y is None:
        return phi2, None, single
    y2 = np.atleast_1d(np.asarray(y))
    if y2.shape != (phi2.shape[0],):
        raise ShapeError(f"{y2.shape[0]} labels for {phi2.shape[0]} distance rows")
    if not np.issubdtype(y2.dtype, np.integer):
        raise InputError("class labels must be integers")
    c = phi2.shape[1]
    if y2.size and (y2.min() < 0 or y2.max() >= c):
        raise InputError(f"class label outside [0, {c})")
    return phi2, y2, single


def softml_loss(phi, y, lam: float = 1.0) -> float:
    """SoftML loss summed over the batch.

    ``J = phi_y + sum_{j != y} softplus(lam - phi_j)`` per sample: the correct
    class distance is pulled down, every other class is pushed beyond ``lam``.
    """
    phi2, y2, _ = _as_batch(phi, y)
    rows = np.arange(phi2.shape[0])
    sp = softplus(lam - phi2)
    sp[rows, y2] = 0.0
    return float(phi2[rows, y2].sum() + sp.sum())


def softml_grad(phi, y, lam: float = 1.0) -> np.ndarray:
    """``dJ/dphi``: 1 on the labelled class, ``-sigmoid(lam - phi_j)`` elsewhere."""
    phi2, y2, single = _as_batch(phi, y)
    rows = np.arange(phi2.shape[0])
    g = -sigmoid(lam - phi2)
    g[rows, y2] = 1.0
    return g[0] if single else g


def _check_finite(phi):
    if np.isnan(phi).any():
        raise NumericError("NaN in distance vector")


def log_class_probabilities(phi, lam: float = 1.0) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    _check_finite(phi)
    sp = softplus(lam - phi)
    return -phi + sp - sp.sum(axis=-1, keepdims=True)


def class_probabilities(phi, lam: float = 1.0) -> np.ndarray:
    """Non-normalised class scores ``exp(-phi_k) (1 + e^{lam-phi_k}) / prod_j (1 + e^{lam-phi_j})``.

    These do not sum to one together with the rejection probability.
    """
    return np.exp(log_class_probabilities(phi, lam))


def log_rejection_probability(phi, lam: float = 1.0):
    phi = np.asarray(phi, dtype=np.float64)
    _check_finite(phi)
    return -softplus(lam - phi).sum(axis=-1)


def rejection_probability(phi, lam: float = 1.0):
    """Probability that the input belongs to none of the classes: ``prod_j sigmoid(phi_j - lam)``."""
    return np.exp(log_rejection_probability(phi, lam))


def predict(phi) -> np.ndarray:
    """Index of the nearest prototype; ties go to the lowest index."""
    phi = np.asarray(phi, dtype=np.float64)
    return np.argmin(phi, axis=-1)


# ---------------------------------------------------------------------------
# prototype initialisation


def init_prototypes(
    num_classes: int,
    dim: int,
    features=None,
    labels=None,
    seed: int = 0,
    max_per_class: int = 100,
) -> np.ndarray:
    """Initial prototypes: per-class mean of up to ``max_per_class`` feature rows.

    Classes without any sample (or a call without features) fall back to
    seeded unit-variance Gaussian vectors.
    """
    rng = np.random.default_rng(seed)
    fallback = rng.standard_normal((num_classes, dim))
    if features is None:
        return fallback
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        return fallback
    if features.shape[1] != dim:
        raise ShapeError(f"feature dim {features.shape[1]} != {dim}")
    W = fallback.copy()
    for k in range(num_classes):
        rows = np.flatnonzero(labels == k)[:max_per_class]
        if rows.size == 0:
            logger.warning("class %d has no samples; using random prototype", k)
            continue
        W[k] = features[rows].mean(axis=0)
    return W
