import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeprbf.data import Dataset, PoisonSpec, make_backdoor_test
from deeprbf.errors import InputError
from deeprbf.evaluation import (
    binary_metrics,
    f1_from_pr,
    latency_benchmark,
    poison_success_rate,
    roc_auc,
    sweep_poison_fraction,
    time_callable,
)
from deeprbf.model import TrainConfig, build_model
from deeprbf.numeric import Dense, Flatten, Network, Tanh, init_parameters
from deeprbf.presets import dave2_small, vae_monitor

from oracles import pair_count_auc


# ---------------------------------------------------------------------------
# metrics


def test_f1_reference_values():
    assert f1_from_pr(96.4, 90.83) == pytest.approx(93.53, abs=0.01)


def test_perfect_detector():
    m = binary_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert (m.precision, m.recall, m.f1) == (100.0, 100.0, 100.0)
    assert not m.degenerate


def test_all_negative_predictions():
    m = binary_metrics([0, 0, 0], [1, 0, 1])
    assert m.precision == 0.0 and m.f1 == 0.0 and m.degenerate


def test_counts_and_rates():
    m = binary_metrics([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (m.tp, m.fp, m.tn, m.fn) == (2, 1, 1, 1)
    assert m.tpr == pytest.approx(2 / 3) and m.fpr == pytest.approx(0.5)


def test_length_mismatch():
    with pytest.raises(InputError):
        binary_metrics([1, 0], [1])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
@settings(max_examples=200, deadline=None)
def test_f1_identity(pairs):
    flags, truth = map(np.array, zip(*pairs))
    m = binary_metrics(flags, truth)
    denom = 2 * m.tp + m.fp + m.fn
    want = 100.0 * 2 * m.tp / denom if denom else 0.0
    assert m.f1 == pytest.approx(want, abs=1e-9)
    assert 0.0 <= m.f1 <= 100.0


def test_auc_ties_are_half():
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_separable():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
@settings(max_examples=200, deadline=None)
def test_auc_matches_pair_count(pairs):
    scores, labels = map(np.array, zip(*pairs))
    if labels.all() or not labels.any():
        return
    auc = roc_auc(scores.astype(float), labels)
    assert auc == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)
    assert auc + roc_auc(-scores.astype(float), labels) == pytest.approx(1.0, abs=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(InputError):
        roc_auc([0.1, 0.2], [1, 1])


# ---------------------------------------------------------------------------
# poisoning success


class _Constant:
    def __init__(self, k):
        self.k = k

    def predict(self, x):
        return np.full(len(x), self.k)


def test_psr_extremes():
    x = np.zeros((7, 3, 4, 4))
    assert poison_success_rate(_Constant(2), x, 2) == 1.0
    assert poison_success_rate(_Constant(1), x, 2) == 0.0


def test_psr_empty_set():
    with pytest.raises(InputError):
        poison_success_rate(_Constant(0), np.zeros((0, 3, 4, 4)), 0)


def tiny_signs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    x = np.clip(rng.uniform(0, 0.2, size=(n, 3, 6, 6)) + 0.25 * y[:, None, None, None], 0, 1)
    return Dataset(x, y)


def tiny_factory(head, data, seed):
    net = Network([Flatten(), Dense(6), Tanh()], (3, 6, 6))
    return build_model(head, net, 3, seed, data.images, data.labels)


def _sweep(**kw):
    train_set, test_set = tiny_signs(60, 0), tiny_signs(30, 1)
    spec = PoisonSpec(target=0, patch_h=2, patch_w=2)
    backdoor = make_backdoor_test(test_set, spec)
    cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-2)
    return sweep_poison_fraction(
        kw.pop("fractions", [0.1]), train_set, test_set, backdoor,
        kw.pop("factory", tiny_factory), {"rbf": cfg, "softmax": cfg}, spec, **kw,
    )


def test_single_cell_sweep():
    res = _sweep(master_seed=3)
    assert len(res.rows("rbf")) == 1 and len(res.rows("softmax")) == 1
    cell = res.cell("rbf", 0.1)
    assert cell.n_p == 6 and 0.0 <= cell.success_rate <= 1.0
    assert res.to_csv().splitlines()[0] == "fraction,head,n_p,success_rate,test_accuracy,failed"


def test_sweep_deterministic():
    a, b = _sweep(fractions=[0.0, 0.2], master_seed=1), _sweep(fractions=[0.0, 0.2], master_seed=1)
    assert a.to_json() == b.to_json()


def test_sweep_resumes_from_cache(tmp_path):
    first = _sweep(master_seed=2, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("cell_*.json"))) == 2
    boom = lambda *a: (_ for _ in ()).throw(AssertionError("retrained a cached cell"))
    assert _sweep(master_seed=2, cache_dir=tmp_path, factory=boom).to_json() == first.to_json()


def test_failed_cell_recorded():
    def factory(head, data, seed):
        model = tiny_factory(head, data, seed)
        if head == "softmax":
            model.backbone.params[1]["w"][:] = np.nan
        return model

    res = _sweep(factory=factory, master_seed=0)
    assert res.cell("softmax", 0.1).failed and res.cell("softmax", 0.1).success_rate is None
    assert not res.cell("rbf", 0.1).failed
    json.dumps(res.to_json())


def test_sweep_fraction_order():
    with pytest.raises(InputError):
        _sweep(fractions=[0.2, 0.1])


# ---------------------------------------------------------------------------
# latency


def test_repetitions_floor():
    with pytest.raises(InputError):
        time_callable(lambda: None, repetitions=9)


def test_timing_report_fields():
    r = time_callable(lambda: sum(range(100)), repetitions=10, warmup=0)
    assert r["repetitions"] == 10 and r["median_ms"] >= 0 and "numpy" in r["environment"]


def test_single_pass_beats_separate_monitor():
    net = dave2_small()
    model = build_model("rbf", net, 10, seed=0)
    monitor = vae_monitor()
    monitor.params = init_parameters(monitor, 1)
    batch = np.random.default_rng(0).uniform(size=(8, 1, 64, 64))
    single = latency_benchmark(model, batch, repetitions=10)
    both = latency_benchmark(model, batch, repetitions=10, monitor=monitor)
    assert single["median_ms"] < both["median_ms"]
