import numpy as np
import pytest

from deeprbf.baselines import SoftmaxHead
from deeprbf.errors import ConfigError, InputError, NumericError
from deeprbf.model import Model, TrainConfig, TrainingDiverged, build_model, build_rbf_model, train
from deeprbf.numeric import Conv2D, Dense, Flatten, Network, ReLU, Tanh, init_parameters
from deeprbf.presets import dave2_small, mlp_tiny, resnet_small
from deeprbf.rbf import RbfHead


def blobs(n=200, seed=0, sep=3.0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2)) * 0.6 + np.where(y[:, None] == 1, sep / 2, -sep / 2)
    return x, y


def four_blobs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    centres = np.array([[2, 2], [-2, 2], [-2, -2], [2, -2]], float)
    y = rng.integers(0, 4, n)
    return centres[y] + rng.normal(size=(n, 2)) * 0.7, y


# ---------------------------------------------------------------------------
# architecture rule


def test_rbf_requires_final_tanh():
    net = Network([Dense(3)], (2,))
    with pytest.raises(ConfigError):
        Model(net, RbfHead(np.zeros((2, 3))))


def test_no_dense_after_last_conv():
    net = Network([Conv2D(2, 3), Flatten(), Dense(4), Tanh()], (1, 5, 5))
    with pytest.raises(ConfigError, match="dense"):
        Model(net, RbfHead(np.zeros((2, 4))))


def test_softmax_head_has_no_rule():
    net = Network([Conv2D(2, 3), Flatten(), Dense(4)], (1, 5, 5))
    net.params = init_parameters(net, 0)
    Model(net, SoftmaxHead.init(4, 3, 0))


def test_head_dim_must_match():
    with pytest.raises(ConfigError):
        Model(mlp_tiny(), RbfHead(np.zeros((2, 5))))


@pytest.mark.parametrize("make", [dave2_small, resnet_small])
def test_presets_accept_rbf_heads(make):
    net = make()
    net.params = init_parameters(net, 0)
    Model(net, RbfHead(np.zeros((3, net.output_shape[0]))))


# ---------------------------------------------------------------------------
# training


def test_blobs_reach_99_percent_in_50_epochs():
    x, y = blobs()
    model = build_rbf_model(mlp_tiny(), 2, seed=0, x=x, y=y)
    log = train(model, x, y, TrainConfig(epochs=50, batch_size=16, lr=1e-2)).log
    assert max(e["train_accuracy"] for e in log) >= 0.99
    assert model.accuracy(x, y) >= 0.99


def test_zero_epochs_leaves_parameters():
    x, y = blobs(20)
    model = build_rbf_model(mlp_tiny(), 2, seed=1, x=x, y=y)
    before = model.copy_parameters()
    result = train(model, x, y, TrainConfig(epochs=0))
    assert result.log == []
    for a, b in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("head", ["rbf", "softmax"])
def test_same_seed_identical_parameters(head):
    x, y = blobs(64)
    runs = []
    for _ in range(2):
        m = build_model(head, mlp_tiny(), 2, seed=3, x=x, y=y)
        train(m, x, y, TrainConfig(epochs=3, batch_size=8, seed=9, lr=1e-2))
        runs.append(m.parameters())
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_smoothed_loss_decreases():
    x, y = four_blobs()
    m = build_rbf_model(mlp_tiny(), 4, seed=0, x=x, y=y)
    losses = [e["loss"] for e in train(m, x, y, TrainConfig(epochs=30, batch_size=32, lr=5e-3)).log]
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 0)


def test_lambda_has_little_effect():
    x, y = four_blobs(seed=1)
    xt, yt = four_blobs(seed=2)
    acc = []
    for lam in (0.5, 1.0, 2.0):
        m = build_rbf_model(mlp_tiny(), 4, seed=0, x=x, y=y, lam=lam)
        train(m, x, y, TrainConfig(epochs=30, batch_size=32, lr=5e-3))
        acc.append(m.accuracy(xt, yt))
    assert max(acc) - min(acc) < 0.05


def test_sgd_trains_too():
    x, y = blobs()
    m = build_rbf_model(mlp_tiny(), 2, seed=0, x=x, y=y)
    train(m, x, y, TrainConfig(epochs=30, batch_size=16, lr=1e-2, optimizer="sgd"))
    assert m.accuracy(x, y) >= 0.95


def test_divergence_reports_epoch_and_batch():
    x, y = blobs(32)
    x[5, 0] = np.inf
    m = build_rbf_model(mlp_tiny(), 2, seed=0)
    with pytest.raises(TrainingDiverged) as info:
        train(m, x, y, TrainConfig(epochs=2, batch_size=8))
    assert info.value.epoch == 1 and 0 <= info.value.batch < 4
    assert isinstance(info.value, NumericError)


def test_labels_must_be_in_range():
    x, y = blobs(10)
    m = build_rbf_model(mlp_tiny(), 2, seed=0)
    with pytest.raises(InputError):
        train(m, x, y + 2, TrainConfig(epochs=1))


def test_early_stopping_restores_best():
    x, y = four_blobs(seed=3)
    xv, yv = four_blobs(100, seed=4)
    m = build_rbf_model(mlp_tiny(), 4, seed=0, x=x, y=y)
    result = train(m, x, y, TrainConfig(epochs=40, batch_size=32, lr=5e-3, patience=3), val=(xv, yv))
    best = max(e["val_accuracy"] for e in result.log)
    assert m.accuracy(xv, yv) == best
    assert result.best_epoch <= result.stopped_epoch


def test_on_epoch_sees_every_entry():
    x, y = blobs(16)
    seen = []
    m = build_rbf_model(mlp_tiny(), 2, seed=0, x=x, y=y)
    r = train(m, x, y, TrainConfig(epochs=4, batch_size=4), on_epoch=seen.append)
    assert seen == r.log and [e["epoch"] for e in seen] == [1, 2, 3, 4]


@pytest.mark.parametrize("kw", [{"epochs": -1}, {"batch_size": 0}, {"optimizer": "rmsprop"}, {"lr": 0.0}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_heads_share_backbone_init():
    x, y = blobs(20)
    a = build_model("rbf", mlp_tiny(), 2, seed=4, x=x, y=y)
    b = build_model("softmax", mlp_tiny(), 2, seed=4, x=x, y=y)
    for (na, pa), (nb, pb) in zip(a.backbone.named_parameters(), b.backbone.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa, pb)


def test_prototypes_start_at_class_means():
    x, y = blobs(50)
    m = build_rbf_model(mlp_tiny(), 2, seed=0, x=x, y=y)
    f = m.features(x)
    np.testing.assert_allclose(m.head.prototypes[1], f[y == 1].mean(axis=0), atol=1e-12)


def test_model_input_shape_checked():
    m = build_rbf_model(Network([Conv2D(2, 3), ReLU(), Flatten(), Tanh()], (1, 5, 5)), 2, seed=0)
    with pytest.raises(InputError):
        m.predict(np.zeros((1, 1, 6, 6)))
