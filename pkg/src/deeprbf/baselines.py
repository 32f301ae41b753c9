"""Comparison methods: a softmax classification head and activation clustering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numeric import DTYPE

logger = logging.getLogger(__name__)


def log_softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, y):
    """Summed cross-entropy and its gradient ``softmax(logits) - onehot(y)``.

    Accepts a single logit vector with an int label or an N x c batch with N
    labels; the gradient has the shape of ``logits``.
    """
    z = np.asarray(logits, dtype=DTYPE)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y2 = np.atleast_1d(np.asarray(y))
    if y2.shape != (z2.shape[0],):
        raise ShapeError(f"{y2.shape[0]} labels for {z2.shape[0]} logit rows")
    c = z2.shape[1]
    if y2.size and (y2.min() < 0 or y2.max() >= c):
        raise InputError(f"class label outside [0, {c})")
    logp = log_softmax(z2)
    rows = np.arange(z2.shape[0])
    loss = float(-logp[rows, y2].sum())
    grad = np.exp(logp)
    grad[rows, y2] -= 1.0
    return loss, grad[0] if single else grad


@dataclass
class SoftmaxHead:
    """Dense layer plus softmax, trained with categorical cross-entropy."""

    weight: np.ndarray
    bias: np.ndarray
    kind = "softmax"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bad softmax head shapes {self.weight.shape}, {self.bias.shape}")

    @classmethod
    def init(cls, dim: int, num_classes: int, seed: int) -> "SoftmaxHead":
        rng = np.random.default_rng(seed)
        limit = np.sqrt(6.0 / (dim + num_classes))
        return cls(rng.uniform(-limit, limit, (dim, num_classes)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def scores(self, features):
        return np.asarray(features, dtype=DTYPE) @ self.weight + self.bias

    def predict_from_features(self, features):
        return np.argmax(self.scores(features), axis=-1)

    def loss_and_grad(self, features, labels):
        f = np.asarray(features, dtype=DTYPE)
        loss, g = softmax_cross_entropy(self.scores(f), labels)
        return loss, g @ self.weight.T, {"weight": f.T @ g, "bias": g.sum(axis=0)}

    def named_parameters(self):
        return [("head.weight", self.weight), ("head.bias", self.bias)]

    def set_parameters(self, arrays):
        self.weight, self.bias = arrays

    def describe(self) -> dict:
        return {"kind": "softmax", "num_classes": self.num_classes, "dim": self.dim}

    def extra_arrays(self):
        return []


# ---------------------------------------------------------------------------
# PCA by power iteration


def pca_fit(X, target_dim: int, tol: float = 1e-13, max_iter: int = 20000, seed: int = 0):
    """Top principal directions of ``X`` (N x d) via power iteration with deflation.

    Returns ``(components, mean, eigenvalues)``; components are unit-norm rows
    in descending eigenvalue order, each with its largest-magnitude entry made
    positive.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("pca_fit needs an N x d matrix with N >= 2")
    n, d = X.shape
    if not 1 <= target_dim <= d:
        raise InputError(f"target_dim {target_dim} must lie in [1, {d}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (n - 1)
    rng = np.random.default_rng(seed)
    # residual norms below this are roundoff: the remaining spectrum is null
    floor = 1e-12 * max(float(np.trace(C)), np.finfo(DTYPE).tiny)
    comps = np.zeros((target_dim, d))
    eigvals = np.zeros(target_dim)
    for i in range(target_dim):
        prev = comps[:i]
        v = rng.standard_normal(d)
        v -= prev.T @ (prev @ v)
        v /= np.linalg.norm(v)
        lam = float(v @ C @ v)
        for _ in range(max_iter):
            w = C @ v
            w -= prev.T @ (prev @ w)
            norm = np.linalg.norm(w)
            if norm <= floor:
                break
            w /= norm
            w -= prev.T @ (prev @ w)
            w /= np.linalg.norm(w)
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            lam = float(v @ C @ v)
            if done:
                break
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps[i] = v
        eigvals[i] = lam
    return comps, mean, eigvals


def pca_transform(X, components, mean):
    return (np.asarray(X, dtype=DTYPE) - mean) @ components.T


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(X, centroids):
    diff = X[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centroids = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(X, np.asarray(centroids)).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids.append(X[idx])
    return np.asarray(centroids, dtype=DTYPE)


def _lloyd(X, centroids, max_iter):
    k = centroids.shape[0]
    history = []
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centroids)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(X)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = d2[np.arange(len(X)), assign].argmax()
                centroids[j] = X[far]
                assign[far] = j
    d2 = _sq_dists(X, centroids)
    assign = d2.argmin(axis=1)
    sse = float(d2[np.arange(len(X)), assign].sum())
    return assign, centroids, sse, history


def _partition_sse(X, assign, k) -> float:
    return float(sum(((X[assign == j] - X[assign == j].mean(axis=0)) ** 2).sum()
                     for j in range(k) if np.any(assign == j)))


def _hartigan(X, assign, k, history, max_moves=10_000):
    """Single-point transfers that lower the exact SSE, best move first.

    Moving x from cluster a to b changes the SSE by
    n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2, so the criterion accounts
    for both centroids shifting. Every resulting optimum is also a Lloyd
    fixpoint, but Lloyd fixpoints with an improving transfer are escaped.
    """
    assign = assign.copy()
    idx = np.arange(len(X))
    for _ in range(max_moves):
        sizes = np.bincount(assign, minlength=k).astype(DTYPE)
        cents = np.stack([X[assign == j].mean(axis=0) if sizes[j] else X[0] for j in range(k)])
        d2 = _sq_dists(X, cents)
        own = sizes[assign]
        leave = np.where(own > 1, own / np.maximum(own - 1, 1) * d2[idx, assign], -np.inf)
        delta = sizes / (sizes + 1) * d2 - leave[:, None]
        delta[idx, assign] = np.inf
        i, j = np.unravel_index(np.argmin(delta), delta.shape)
        if not delta[i, j] < -1e-12 * max(1.0, float(d2[idx, assign].sum())):
            break
        assign[i] = j
        history.append(_partition_sse(X, assign, k))
    cents = np.stack([X[assign == j].mean(axis=0) for j in range(k)])
    d2 = _sq_dists(X, cents)
    assign = d2.argmin(axis=1)
    return assign, cents, float(d2[idx, assign].sum()), history


@dataclass(frozen=True)
class AcConfig:
    n_clusters: int = 2
    dims: int = 10
    restarts: int = 10
    max_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ConfigError("ac.n_clusters", "must be >= 2")
        if self.dims < 1:
            raise ConfigError("ac.dims", "must be >= 1")
        if self.restarts < 1 or self.max_iter < 1:
            raise ConfigError("ac.restarts", "restarts and max_iter must be >= 1")


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    sse: float
    history: list


def kmeans(X, k: int, restarts: int = 10, max_iter: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds, polished by Hartigan transfers.

    The restart with the lowest SSE wins.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] < k or k < 1:
        raise InputError(f"kmeans needs at least k={k} rows, got {X.shape}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        assign, cents, _, hist = _lloyd(X, _kmeanspp(X, k, rng), max_iter)
        assign, cents, sse, hist = _hartigan(X, assign, k, hist)
        if best is None or sse < best.sse:
            best = KMeansResult(assign, cents, sse, hist)
    return best


def activation_clustering_clean(activations, labels, config: AcConfig = AcConfig()) -> np.ndarray:
    """Flag samples in the smaller k-means cluster of each labelled class.

    ``activations`` are the penultimate-layer vectors (N x d). Per class they
    are reduced with PCA to ``config.dims`` dimensions and split by k-means;
    every member of the strictly smallest cluster is flagged. Classes with
    fewer than two samples are skipped.
    """
    A = np.asarray(activations, dtype=DTYPE)
    labels = np.asarray(labels)
    if A.shape[0] != labels.shape[0]:
        raise InputError("one label per activation row is required")
    flags = np.zeros(A.shape[0], dtype=bool)
    for cls in np.unique(labels):
        rows = np.flatnonzero(labels == cls)
        if rows.size < max(2, config.n_clusters):
            logger.warning("class %s has %d samples; skipped", cls, rows.size)
            continue
        Xc = A[rows]
        dims = min(config.dims, Xc.shape[1])
        comps, mean, _ = pca_fit(Xc, dims, tol=1e-8, max_iter=500, seed=config.seed)
        Z = pca_transform(Xc, comps, mean)
        res = kmeans(Z, config.n_clusters, config.restarts, config.max_iter, seed=config.seed)
        sizes = np.bincount(res.assignments, minlength=config.n_clusters)
        smallest = np.flatnonzero(sizes == sizes.min())
        if smallest.size == 1:
            flags[rows[res.assignments == smallest[0]]] = True
    return flags
