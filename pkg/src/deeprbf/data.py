"""Datasets, synthetic generators, physical line attacks and backdoor poisoning.

Images are stored as float32 arrays in [0, 1] (N x C x H x W) so that they
round-trip losslessly through the RBDS container; models promote them to
float64 on the way in. Every generator is a pure function of its parameters
and seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InputError, MagicError, RbdsError, TruncatedError, VersionError

CONTINUOUS = "continuous"
CLASS = "class"

THETA = 30.0
TRACK_SIZE = 64
SIGN_SIZE = 32


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    label_kind: str = CLASS
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise InputError(f"images must be N x C x H x W with N >= 1, got {self.images.shape}")
        n = self.images.shape[0]
        if self.label_kind == CONTINUOUS:
            self.labels = np.asarray(self.labels, dtype=np.float32)
        elif self.label_kind == CLASS:
            labels = np.asarray(self.labels)
            if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
                raise InputError("class labels must be nonnegative integers")
            self.labels = labels.astype(np.int64)
        else:
            raise InputError(f"unknown label kind {self.label_kind!r}")
        if self.labels.shape != (n,):
            raise InputError(f"{self.labels.shape} labels for {n} images")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (n,):
                raise InputError(f"mask length {self.mask.shape} != {n}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.label_kind,
            None if self.mask is None else self.mask[idx],
        )


def concat(parts) -> Dataset:
    parts = list(parts)
    kinds = {p.label_kind for p in parts}
    if len(kinds) != 1:
        raise InputError("cannot concatenate datasets with different label kinds")
    has_mask = any(p.mask is not None for p in parts)
    mask = (
        np.concatenate([p.mask if p.mask is not None else np.zeros(len(p), bool) for p in parts])
        if has_mask
        else None
    )
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        kinds.pop(),
        mask,
    )


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


# ---------------------------------------------------------------------------
# steering track images


def gen_track_image(curvature: float, seed: int, size: int = TRACK_SIZE, theta: float = THETA):
    """Render a grey road with two lane lines bending by ``curvature``.

    Returns ``(image 1 x size x size, steering degrees)`` with
    ``steering = theta * curvature``. Zero curvature gives straight, parallel
    lanes; positive curvature bends the far end of the lane to the right.
    """
    if not -1.0 <= curvature <= 1.0:
        raise InputError(f"curvature {curvature} outside [-1, 1]")
    rng = np.random.default_rng(seed)
    background = 0.45 + rng.uniform(-0.05, 0.05)
    shift = rng.uniform(-3.0, 3.0)
    noise = rng.normal(0.0, 0.03, size=(size, size))

    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    far = (size - 1 - rows) / (size - 1)  # 0 at the bottom of the frame, 1 at the top
    center = (size - 1) / 2.0 + shift + 0.4 * size * curvature * far**2
    half = 0.28 * size
    img = background + noise
    for edge in (center - half, center + half):
        coverage = np.clip(2.0 - np.abs(cols - edge), 0.0, 1.0)
        img = img * (1.0 - coverage) + 0.9 * coverage
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img[None], float(np.float32(theta * curvature))


def make_steering_dataset(n: int = 6000, seed: int = 0, theta: float = THETA) -> Dataset:
    """``n`` track images with uniformly drawn curvature and continuous labels."""
    curv = _rng(seed, 0).uniform(-1.0, 1.0, size=n)
    images = np.empty((n, 1, TRACK_SIZE, TRACK_SIZE), dtype=np.float32)
    labels = np.empty(n, dtype=np.float32)
    for i in range(n):
        img, s = gen_track_image(float(curv[i]), int(_rng(seed, 1, i).integers(2**63)), theta=theta)
        images[i] = img
        labels[i] = s
    return Dataset(images, labels, CONTINUOUS)


@dataclass(frozen=True)
class LineAttackSpec:
    """A dark line painted across the road.

    ``angle`` is measured in degrees from the horizontal image axis;
    ``position`` in [0, 1] places the line's centre from the top to the bottom
    of the frame (it always passes through the middle column).
    """

    angle: float = 0.0
    position: float = 0.5
    width: float = 3.0
    intensity: float = 0.0

    def __post_init__(self):
        if self.width < 1:
            raise InputError("line width must be >= 1 pixel")
        if not 0.0 <= self.intensity <= 1.0:
            raise InputError("line intensity must lie in [0, 1]")


def line_attack_mask(shape, spec: LineAttackSpec) -> np.ndarray:
    """Boolean H x W mask of pixel centres within ``width / 2`` of the line."""
    h, w = shape
    a = np.deg2rad(spec.angle)
    x0 = (w - 1) / 2.0
    y0 = spec.position * (h - 1)
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.abs(-np.sin(a) * (xs - x0) + np.cos(a) * (ys - y0))
    return dist <= spec.width / 2.0


def apply_line_attack(image, spec: LineAttackSpec) -> np.ndarray:
    img = np.array(image, dtype=np.float32, copy=True)
    m = line_attack_mask(img.shape[-2:], spec)
    img[..., m] = np.float32(spec.intensity)
    return img


def random_line_attack(rng: np.random.Generator) -> LineAttackSpec:
    return LineAttackSpec(
        angle=float(rng.uniform(-60.0, 60.0)),
        position=float(rng.uniform(0.15, 0.85)),
        width=float(rng.integers(3, 7)),
        intensity=float(rng.uniform(0.0, 0.05)),
    )


def make_attacked_set(clean: Dataset, seed: int) -> Dataset:
    """Clean samples followed by a line-attacked copy of each; ``mask`` marks the attacked half."""
    rng = _rng(seed, 7)
    attacked = np.stack([apply_line_attack(img, random_line_attack(rng)) for img in clean.images])
    n = len(clean)
    return Dataset(
        np.concatenate([clean.images, attacked]),
        np.concatenate([clean.labels, clean.labels]),
        clean.label_kind,
        np.concatenate([np.zeros(n, bool), np.ones(n, bool)]),
    )


# ---------------------------------------------------------------------------
# traffic-sign-like glyph images

_PALETTE = [
    (0.85, 0.10, 0.10),
    (0.10, 0.20, 0.85),
    (0.10, 0.60, 0.20),
    (0.95, 0.95, 0.95),
    (0.05, 0.05, 0.05),
    (0.55, 0.10, 0.60),
    (0.10, 0.70, 0.75),
    (0.45, 0.25, 0.10),
    (0.95, 0.50, 0.70),
]
_SHAPES = ("disk", "square", "triangle", "diamond", "ring")
MAX_SIGN_CLASSES = len(_SHAPES) * len(_PALETTE)


def _glyph_mask(shape_name, dy, dx, r):
    if shape_name == "disk":
        return dy**2 + dx**2 <= r**2
    if shape_name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape_name == "triangle":
        return (dy <= 0.7 * r) & (np.abs(dx) <= 0.6 * (dy + r))
    if shape_name == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    d2 = dy**2 + dx**2
    return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)


def gen_sign_image(k: int, seed: int, num_classes: int = 10, size: int = SIGN_SIZE) -> np.ndarray:
    """A 3 x size x size glyph whose shape and colour identify class ``k``."""
    if not 0 <= k < num_classes:
        raise InputError(f"class {k} outside [0, {num_classes})")
    if num_classes > MAX_SIGN_CLASSES:
        raise InputError(f"at most {MAX_SIGN_CLASSES} sign classes are supported")
    rng = np.random.default_rng(seed)
    bg = rng.uniform(0.35, 0.55, size=3)
    img = bg[:, None, None] + rng.normal(0.0, 0.03, size=(3, size, size))
    cy = (size - 1) / 2.0 + rng.uniform(-2.0, 2.0)
    cx = (size - 1) / 2.0 + rng.uniform(-2.0, 2.0)
    r = 0.31 * size * rng.uniform(0.85, 1.05)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    m = _glyph_mask(_SHAPES[k % len(_SHAPES)], ys - cy, xs - cx, r)
    color = np.asarray(_PALETTE[(k // len(_SHAPES)) % len(_PALETTE)])
    color = np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    img[:, m] = color[:, None] + rng.normal(0.0, 0.02, size=(3, int(m.sum())))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sign_dataset(per_class: int = 500, num_classes: int = 10, seed: int = 0) -> Dataset:
    n = per_class * num_classes
    images = np.empty((n, 3, SIGN_SIZE, SIGN_SIZE), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, k in enumerate(labels):
        images[i] = gen_sign_image(int(k), int(_rng(seed, 2, i).integers(2**63)), num_classes)
    return Dataset(images, labels, CLASS)


# ---------------------------------------------------------------------------
# backdoor poisoning

YELLOW = (1.0, 0.9, 0.1)


@dataclass(frozen=True)
class PoisonSpec:
    target: int = 0
    n_p: int = 0
    patch_h: int = 4
    patch_w: int = 4
    color: tuple = YELLOW
    seed: int = 0

    def __post_init__(self):
        if self.patch_h < 1 or self.patch_w < 1:
            raise InputError("patch dimensions must be positive")
        if self.n_p < 0:
            raise InputError("n_p must be >= 0")
        if self.target < 0:
            raise InputError("target class must be >= 0")


def apply_backdoor_key(image, spec: PoisonSpec, seed: int) -> np.ndarray:
    """Overwrite a ``patch_h x patch_w`` rectangle at a seeded random location."""
    img = np.array(image, dtype=np.float32, copy=True)
    c, h, w = img.shape
    if spec.patch_h > h or spec.patch_w > w:
        raise InputError(f"patch {spec.patch_h}x{spec.patch_w} larger than image {h}x{w}")
    color = np.asarray(spec.color, dtype=np.float32)
    if color.shape != (c,):
        raise InputError(f"patch colour has {color.size} channels, image has {c}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - spec.patch_h + 1))
    left = int(rng.integers(0, w - spec.patch_w + 1))
    img[:, top : top + spec.patch_h, left : left + spec.patch_w] = color[:, None, None]
    return img


def _key_seed(spec_seed: int, index: int) -> int:
    return int(_rng(spec_seed, 3, index).integers(2**63))


def poison_dataset(dataset: Dataset, spec: PoisonSpec):
    """Key ``n_p`` random non-target samples and relabel them as ``spec.target``.

    Returns ``(poisoned dataset, ground-truth mask)``; the poisoned dataset
    carries the same mask.
    """
    if dataset.label_kind != CLASS:
        raise InputError("poisoning requires class labels")
    candidates = np.flatnonzero(dataset.labels != spec.target)
    if spec.n_p > candidates.size:
        raise InputError(f"n_p={spec.n_p} exceeds the {candidates.size} non-target samples")
    chosen = np.sort(_rng(spec.seed, 4).choice(candidates, size=spec.n_p, replace=False))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    for i in chosen:
        images[i] = apply_backdoor_key(images[i], spec, _key_seed(spec.seed, int(i)))
    labels[chosen] = spec.target
    mask = np.zeros(len(dataset), dtype=bool)
    mask[chosen] = True
    return Dataset(images, labels, CLASS, mask), mask


def make_backdoor_test(dataset: Dataset, spec: PoisonSpec) -> Dataset:
    """Keyed copies of every non-target sample; labels keep the true class."""
    keep = np.flatnonzero(dataset.labels != spec.target)
    if keep.size == 0:
        raise InputError("no non-target samples to key")
    images = np.stack(
        [apply_backdoor_key(dataset.images[i], spec, _key_seed(spec.seed + 1, int(i))) for i in keep]
    )
    return Dataset(images, dataset.labels[keep], CLASS, np.ones(keep.size, dtype=bool))


# ---------------------------------------------------------------------------
# splitting


def split_dataset(dataset: Dataset, ratios=(70, 15, 15), seed: int = 0):
    """Seeded shuffle and contiguous train/val/test partition.

    Train and val sizes are rounded down; leftover samples go to test.
    """
    ratios = tuple(ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 100) > 1e-9:
        raise InputError(f"split ratios must be three nonnegative numbers summing to 100, got {ratios}")
    n = len(dataset)
    n_train = int(np.floor(n * ratios[0] / 100 + 1e-9))
    n_val = int(np.floor(n * ratios[1] / 100 + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    if any(p.size == 0 for p in parts):
        raise InputError(f"{n} samples are too few for a {ratios} split")
    return tuple(dataset.subset(p) for p in parts)


# ---------------------------------------------------------------------------
# RBDS container

MAGIC = b"RBDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIBB")


def dumps_rbds(dataset: Dataset) -> bytes:
    n, c, h, w = dataset.images.shape
    kind = 0 if dataset.label_kind == CONTINUOUS else 1
    has_mask = dataset.mask is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, c, h, w, kind, int(has_mask)),
        dataset.images.astype("<f4").tobytes(),
        dataset.labels.astype("<f4" if kind == 0 else "<u4").tobytes(),
    ]
    if has_mask:
        parts.append(dataset.mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def loads_rbds(buf: bytes) -> Dataset:
    if len(buf) < len(MAGIC):
        raise TruncatedError(f"file holds {len(buf)} bytes, too short for a header")
    if buf[:4] != MAGIC:
        raise MagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("header truncated")
    _, version, n, c, h, w, kind, has_mask = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"unsupported RBDS version {version}")
    if kind not in (0, 1):
        raise RbdsError(f"unknown label kind code {kind}")
    if has_mask not in (0, 1):
        raise RbdsError(f"bad has_mask flag {has_mask}")
    npix = n * c * h * w
    need = _HEADER.size + 4 * npix + 4 * n + (n if has_mask else 0)
    if len(buf) < need:
        raise TruncatedError(f"payload truncated: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise RbdsError(f"{len(buf) - need} trailing bytes after payload")
    off = _HEADER.size
    images = np.frombuffer(buf, dtype="<f4", count=npix, offset=off).reshape(n, c, h, w)
    off += 4 * npix
    labels = np.frombuffer(buf, dtype="<f4" if kind == 0 else "<u4", count=n, offset=off)
    off += 4 * n
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off) != 0 if has_mask else None
    return Dataset(
        images.astype(np.float32),
        labels.astype(np.float32 if kind == 0 else np.int64),
        CONTINUOUS if kind == 0 else CLASS,
        mask,
    )


def write_rbds(path, dataset: Dataset) -> None:
    Path(path).write_bytes(dumps_rbds(dataset))


def read_rbds(path) -> Dataset:
    return loads_rbds(Path(path).read_bytes())


def with_labels(dataset: Dataset, labels, label_kind=CLASS) -> Dataset:
    return replace(dataset, labels=labels, label_kind=label_kind)
