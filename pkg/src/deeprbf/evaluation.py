"""Metrics and experiment drivers: detection scores, poisoning sweeps, cleaning, latency."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .baselines import AcConfig, activation_clustering_clean
from .data import Dataset, PoisonSpec, poison_dataset
from .detector import clean_dataset, rejection_scores
from .errors import InputError, NumericError
from .model import Model, TrainConfig, train
from .numeric import forward
from .rbf import predict, rejection_probability
from .seeding import derive_seed

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# binary detection metrics


def f1_from_pr(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (same units in, same units out); 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class BinaryMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    @property
    def tpr(self) -> float:
        return self.recall / 100.0

    @property
    def fpr(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tpr"] = self.tpr
        d["fpr"] = self.fpr
        return d


def binary_metrics(flags, truth) -> BinaryMetrics:
    """Confusion counts with precision, recall and F1 as percentages.

    A zero denominator yields 0 for that score and sets ``degenerate``.
    """
    flags = np.asarray(flags, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if flags.shape != truth.shape:
        raise InputError(f"{flags.shape[0]} predictions for {truth.shape[0]} labels")
    tp = int(np.sum(flags & truth))
    fp = int(np.sum(flags & ~truth))
    tn = int(np.sum(~flags & ~truth))
    fn = int(np.sum(~flags & truth))
    degenerate = False
    if tp + fp:
        precision = 100.0 * tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = 100.0 * tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall == 0:
        degenerate = True
    return BinaryMetrics(tp, fp, tn, fn, precision, recall, f1_from_pr(precision, recall), degenerate)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties; higher scores mean positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# poisoning


def poison_success_rate(model, backdoor_x, target: int) -> float:
    """Fraction of keyed, non-target images classified as ``target``."""
    if len(backdoor_x) == 0:
        raise InputError("backdoor test set is empty")
    pred = model.predict(backdoor_x) if hasattr(model, "predict") else model(backdoor_x)
    return float(np.mean(np.asarray(pred) == target))


@dataclass
class SweepCell:
    fraction: float
    head: str
    n_p: int
    success_rate: float | None
    test_accuracy: float | None
    seed: int
    failed: bool = False
    error: str = ""


@dataclass
class SweepResult:
    cells: list = field(default_factory=list)

    def rows(self, head: str) -> list:
        return sorted((c for c in self.cells if c.head == head), key=lambda c: c.fraction)

    def cell(self, head: str, fraction: float) -> SweepCell:
        for c in self.cells:
            if c.head == head and c.fraction == fraction:
                return c
        raise KeyError((head, fraction))

    def to_json(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "head", "n_p", "success_rate", "test_accuracy", "failed"])
        for c in sorted(self.cells, key=lambda c: (c.fraction, c.head)):
            w.writerow([c.fraction, c.head, c.n_p, c.success_rate, c.test_accuracy, int(c.failed)])
        return buf.getvalue()


ModelFactory = Callable[[str, Dataset, int], Model]


def train_poisoned_cell(
    head: str,
    fraction: float,
    train_set: Dataset,
    base_spec: PoisonSpec,
    make_model: ModelFactory,
    config: TrainConfig,
    master_seed: int,
):
    """Poison ``train_set`` at ``fraction`` and train one model on it.

    Returns ``(model, poisoned dataset, n_p)``. Poison selection depends only
    on ``(master_seed, fraction)``, so both heads see identical data, and the
    model seed depends only on ``master_seed`` so both heads start alike.
    """
    n_p = int(round(fraction * len(train_set)))
    spec = PoisonSpec(
        target=base_spec.target,
        n_p=n_p,
        patch_h=base_spec.patch_h,
        patch_w=base_spec.patch_w,
        color=base_spec.color,
        seed=derive_seed(master_seed, "poison", repr(float(fraction))),
    )
    poisoned, _ = poison_dataset(train_set, spec)
    model_seed = derive_seed(master_seed, "model")
    model = make_model(head, poisoned, model_seed)
    cfg = TrainConfig(**{**asdict(config), "seed": derive_seed(master_seed, "shuffle")})
    train(model, poisoned.images, poisoned.labels, cfg)
    return model, poisoned, n_p


def sweep_poison_fraction(
    fractions,
    train_set: Dataset,
    test_set: Dataset,
    backdoor_test: Dataset,
    make_model: ModelFactory,
    configs: dict,
    base_spec: PoisonSpec,
    master_seed: int = 0,
    cache_dir=None,
    on_model=None,
) -> SweepResult:
    """Poison-fraction sweep over every head in ``configs`` (``{"rbf": cfg, "softmax": cfg}``).

    Each cell is cached as JSON under ``cache_dir`` when given, so an
    interrupted sweep resumes where it stopped. A diverging cell is recorded
    as failed and the sweep continues.
    """
    fractions = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise InputError("fractions must be strictly increasing")
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise InputError("fractions must lie in [0, 1)")
    result = SweepResult()
    for fraction in fractions:
        for head, config in configs.items():
            path = Path(cache_dir, f"cell_{head}_{fraction!r}.json") if cache_dir else None
            if path is not None and path.exists():
                result.cells.append(SweepCell(**json.loads(path.read_text())))
                continue
            try:
                model, _, n_p = train_poisoned_cell(
                    head, fraction, train_set, base_spec, make_model, config, master_seed
                )
                cell = SweepCell(
                    fraction,
                    head,
                    n_p,
                    poison_success_rate(model, backdoor_test.images, base_spec.target),
                    model.accuracy(test_set.images, test_set.labels),
                    master_seed,
                )
                if on_model is not None:
                    on_model(head, fraction, model)
            except NumericError as exc:
                logger.warning("sweep cell %s@%s failed: %s", head, fraction, exc)
                cell = SweepCell(fraction, head, int(round(fraction * len(train_set))),
                                 None, None, master_seed, True, str(exc))
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(asdict(cell), sort_keys=True))
            result.cells.append(cell)
    return result


def cleaning_comparison(model, poisoned: Dataset, mask, beta: float, ac_config: AcConfig = AcConfig()):
    """Distance-threshold cleaning vs activation clustering on the same trained model."""
    mask = np.asarray(mask, dtype=bool)
    rbf_flags = clean_dataset(model, poisoned.images, poisoned.labels, beta)
    ac_flags = activation_clustering_clean(model.features(poisoned.images), poisoned.labels, ac_config)
    return {
        "rbf": binary_metrics(rbf_flags, mask),
        "ac": binary_metrics(ac_flags, mask),
    }, {"rbf": rbf_flags, "ac": ac_flags}


# ---------------------------------------------------------------------------
# physical-attack detection summary


def detection_summary(model, attacked: Dataset, gamma: float) -> dict:
    """Metrics of thresholded rejection probabilities against ``attacked.mask``."""
    if attacked.mask is None:
        raise InputError("attacked set carries no ground-truth mask")
    _, rej = rejection_scores(model, attacked.images)
    flags = rej >= gamma
    clean, bad = rej[~attacked.mask], rej[attacked.mask]
    out = {
        "gamma": float(gamma),
        "metrics": binary_metrics(flags, attacked.mask).to_dict(),
        "clean_median": float(np.median(clean)) if clean.size else None,
        "clean_p95": float(np.quantile(clean, 0.95)) if clean.size else None,
        "attacked_median": float(np.median(bad)) if bad.size else None,
    }
    if clean.size and bad.size:
        out["roc_auc"] = roc_auc(rej, attacked.mask)
    return out, rej


# ---------------------------------------------------------------------------
# latency


def environment() -> str:
    return (
        f"{platform.system()} {platform.machine()} | python {platform.python_version()} "
        f"| numpy {np.__version__} | cpus {os.cpu_count()}"
    )


def time_callable(fn, repetitions: int = 100, warmup: int = 5) -> dict:
    if repetitions < 10:
        raise InputError("at least 10 repetitions are required")
    for _ in range(warmup):
        fn()
    samples = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples[i] = (time.perf_counter() - t0) * 1000.0
    return {
        "mean_ms": float(samples.mean()),
        "median_ms": float(np.median(samples)),
        "p95_ms": float(np.quantile(samples, 0.95)),
        "repetitions": repetitions,
        "environment": environment(),
    }


def latency_benchmark(model, batch, repetitions: int = 100, monitor=None, warmup: int = 5) -> dict:
    """Wall-clock cost of prediction + rejection in one pass.

    With ``monitor`` (a :class:`Network`) the timed step is instead the
    model's prediction followed by a forward pass of the separate monitor.
    """
    x = np.asarray(batch)
    lam = getattr(model.head, "lam", 1.0)

    def single_pass():
        phi = model.scores(x)
        return predict(phi), rejection_probability(phi, lam)

    def with_monitor():
        model.predict(x)
        forward(monitor, x)

    return time_callable(single_pass if monitor is None else with_monitor, repetitions, warmup)
