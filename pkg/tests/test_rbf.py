import logging

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deeprbf.errors import InputError, NumericError, ShapeError
from deeprbf.numeric import finite_difference_gradient
from deeprbf.rbf import (
    RbfHead,
    class_probabilities,
    init_prototypes,
    log_rejection_probability,
    predict,
    rbf_distance_backward,
    rbf_distances,
    rbf_unit,
    rejection_probability,
    sigmoid,
    softml_grad,
    softml_loss,
    softplus,
)

from oracles import rel_error

mpmath.mp.dps = 50


def _mp_softplus(z):
    return mpmath.log(1 + mpmath.exp(z))


# ---------------------------------------------------------------------------
# distances


def test_zero_distance_at_prototype():
    W = np.random.default_rng(0).normal(size=(3, 4))
    phi = rbf_distances(W[1], RbfHead(W))
    assert phi[1] == 0.0 and phi[0] > 0 and phi[2] > 0


def test_euclidean_example():
    phi = rbf_distances(np.array([1.0, 2.0]), RbfHead(np.array([[1.0, 2.0], [0.0, 0.0]])))
    np.testing.assert_array_equal(phi, [0.0, 5.0])


def test_general_form_offset():
    assert rbf_unit(np.zeros(2), np.eye(2), np.array([1.0, -1.0]), 2) == 2.0


def test_l1_unit():
    assert rbf_unit(np.array([3.0, -4.0]), np.eye(2), np.zeros(2), 1) == 7.0


def test_general_head_matches_unit_per_prototype():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 4))
    A = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    head = RbfHead(W, p=3.0, projection=A, offset=b)
    f = rng.normal(size=(5, 4))
    phi = rbf_distances(f, head)
    for i in range(5):
        for k in range(3):
            assert phi[i, k] == pytest.approx(rbf_unit(f[i] - W[k], A, b, 3.0), rel=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        rbf_distances(np.ones((2, 3)), RbfHead(np.ones((2, 4))))


@pytest.mark.parametrize("kw", [{"lam": 0.0}, {"lam": -1.0}, {"p": 0.5}])
def test_head_invariants(kw):
    with pytest.raises(InputError):
        RbfHead(np.ones((2, 2)), **kw)


def test_head_rejects_non_finite_prototypes():
    with pytest.raises(NumericError):
        RbfHead(np.array([[np.nan, 0.0]]))


_quarters = st.integers(-20, 20).map(lambda v: v / 4)


@given(arrays(np.float64, (4, 3), elements=_quarters), arrays(np.float64, (2, 3), elements=_quarters))
@settings(max_examples=60, deadline=None)
def test_distances_nonnegative_and_zero_iff_equal(f, W):
    phi = rbf_distances(f, RbfHead(W))
    assert (phi >= 0).all()
    eq = np.array([[np.array_equal(fi, wk) for wk in W] for fi in f])
    np.testing.assert_array_equal(phi == 0, eq)


@pytest.mark.parametrize("general", [False, True])
def test_distance_backward_matches_fd(general):
    rng = np.random.default_rng(4)
    W = rng.normal(size=(3, 4))
    kw = {"p": 3.0, "projection": rng.normal(size=(4, 3)), "offset": rng.normal(size=3)} if general else {}
    head = RbfHead(W, **kw)
    f = rng.normal(size=(2, 4))
    dphi = rng.normal(size=(2, 3))
    dfeat, dproto = rbf_distance_backward(f, head, dphi)
    num_f = finite_difference_gradient(lambda _: float(np.sum(dphi * rbf_distances(f, head))), f, 1e-5)
    num_w = finite_difference_gradient(lambda _: float(np.sum(dphi * rbf_distances(f, head))), head.prototypes, 1e-5)
    assert rel_error(dfeat, num_f) < 1e-6
    assert rel_error(dproto, num_w) < 1e-6


def test_euclidean_chain_rule():
    f = np.array([[0.5, -0.25]])
    W = np.array([[0.0, 0.0], [1.0, 1.0]])
    dfeat, dproto = rbf_distance_backward(f, RbfHead(W), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(dfeat, 2 * (f - W[0]))
    np.testing.assert_allclose(dproto[0], 2 * (W[0] - f[0]))
    assert not np.any(dproto[1])


# ---------------------------------------------------------------------------
# SoftML


def test_softml_single_class():
    assert softml_loss(np.array([2.5]), 0, 1.0) == 2.5


def test_softml_equal_distances():
    want = float(1 + mpmath.log(2))
    assert softml_loss(np.array([1.0, 1.0]), 0, 1.0) == pytest.approx(want, rel=1e-14)
    assert want == pytest.approx(1.6931, abs=1e-4)


def test_softml_far_negative():
    want = float(_mp_softplus(mpmath.mpf(-9)))
    assert softml_loss(np.array([0.0, 10.0]), 0, 1.0) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(1.2339e-4, rel=1e-4)


def test_softml_batch_is_sum():
    rng = np.random.default_rng(0)
    phi = rng.uniform(0, 5, size=(6, 4))
    y = rng.integers(0, 4, 6)
    total = sum(softml_loss(phi[i], y[i], 0.7) for i in range(6))
    assert softml_loss(phi, y, 0.7) == pytest.approx(total, rel=1e-13)


def test_softml_grad_correct_class_is_one():
    g = softml_grad(np.array([3.0, 0.2, 7.0]), 1, 2.0)
    assert g[1] == 1.0


def test_softml_grad_at_margin():
    g = softml_grad(np.array([0.0, 1.5, 1.5]), 0, 1.5)
    np.testing.assert_array_equal(g[1:], [-0.5, -0.5])


def test_softml_grad_matches_fd_100_draws():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 8))
        phi = rng.uniform(0, 10, size=c)
        y = int(rng.integers(0, c))
        lam = float(rng.uniform(0.1, 5))
        num = finite_difference_gradient(lambda _: softml_loss(phi, y, lam), phi, 1e-5)
        worst = max(worst, rel_error(softml_grad(phi, y, lam), num))
    assert worst < 1e-6


@given(
    arrays(np.float64, st.integers(1, 6), elements=st.floats(0, 1e6)),
    st.floats(0.01, 10),
    st.data(),
)
@settings(max_examples=100, deadline=None)
def test_softml_nonnegative(phi, lam, data):
    y = data.draw(st.integers(0, phi.size - 1))
    assert softml_loss(phi, y, lam) >= 0


def test_softml_limit_to_zero():
    assert softml_loss(np.array([0.0, 1e3, 1e3]), 0, 1.0) < 1e-300


def test_softml_label_out_of_range():
    with pytest.raises(InputError):
        softml_loss(np.array([1.0, 2.0]), 2, 1.0)


def test_softplus_stable():
    z = np.array([-1e6, -50.0, 0.0, 50.0, 1e6])
    sp = softplus(z)
    assert np.isfinite(sp).all()
    assert sp[2] == pytest.approx(np.log(2))
    assert sp[4] == 1e6


# ---------------------------------------------------------------------------
# probabilities


def test_single_class_probability():
    p = class_probabilities(np.array([1.0]), 1.0)
    assert p[0] == pytest.approx(float(mpmath.exp(-1)), rel=1e-14)
    assert p[0] == pytest.approx(0.3679, abs=1e-4)


def test_probability_vanishes_with_distance():
    p = class_probabilities(np.array([0.5, 1e4]), 1.0)
    assert p[1] == 0.0 and p[0] > 0


def test_equal_distances_equal_probability():
    p = class_probabilities(np.array([2.0, 2.0, 5.0]), 1.0)
    assert p[0] == p[1]


def test_probabilities_nan():
    with pytest.raises(NumericError):
        class_probabilities(np.array([np.nan, 1.0]))
    with pytest.raises(NumericError):
        rejection_probability(np.array([np.nan, 1.0]))


def test_probabilities_survive_huge_distances():
    phi = np.array([1e6, 3e5, 0.0])
    assert np.isfinite(class_probabilities(phi, 1.0)).all()
    assert 0 < rejection_probability(phi, 1.0) < 1


def test_rejection_examples():
    assert rejection_probability(np.array([1.0, 1.0]), 1.0) == pytest.approx(0.25, abs=1e-15)
    assert rejection_probability(np.array([3.0]), 3.0) == pytest.approx(0.5, abs=1e-15)
    assert rejection_probability(np.array([1e5, 1e5]), 1.0) == 1.0


def test_rejection_matches_high_precision():
    rng = np.random.default_rng(0)
    for _ in range(50):
        phi = rng.uniform(0, 50, size=int(rng.integers(1, 10)))
        lam = float(rng.uniform(0.1, 10))
        want = mpmath.fprod([1 / (1 + mpmath.exp(lam - mpmath.mpf(p))) for p in phi])
        assert rejection_probability(phi, lam) == pytest.approx(float(want), rel=1e-12)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(0, 60)), st.floats(0.1, 20))
@settings(max_examples=100, deadline=None)
def test_rejection_product_identity(phi, lam):
    phi = np.clip(phi, lam - 30, lam + 30)
    r = rejection_probability(phi, lam)
    assert 0 < r < 1 or (r == 1.0 and np.all(phi - lam > 36))
    prod = float(mpmath.fprod([1 + mpmath.exp(lam - mpmath.mpf(p)) for p in phi]))
    assert r * prod == pytest.approx(1.0, rel=1e-10)


@given(arrays(np.float64, st.integers(1, 5), elements=st.floats(0, 25)), st.data())
@settings(max_examples=100, deadline=None)
def test_rejection_increasing_in_each_distance(phi, data):
    j = data.draw(st.integers(0, phi.size - 1))
    bumped = phi.copy()
    bumped[j] += 0.5
    assert log_rejection_probability(bumped, 1.0) > log_rejection_probability(phi, 1.0)


# ---------------------------------------------------------------------------
# prediction


def test_predict_examples():
    assert predict(np.array([5.0, 0.0, 3.0])) == 1
    assert predict(np.array([2.0, 2.0])) == 0


def test_argmin_equals_argmax_probability():
    rng = np.random.default_rng(7)
    phi = rng.uniform(0, 50, size=(10_000, 6))
    for lam in (0.5, 1.0, 5.0):
        np.testing.assert_array_equal(predict(phi), np.argmax(class_probabilities(phi, lam), axis=1))


def test_per_class_map_strictly_decreasing():
    # g(phi) = exp(-phi) + exp(lam - 2 phi) is the per-class numerator
    grid = np.linspace(0, 50, 5001)
    for lam in (0.5, 1.0, 2.0):
        g = np.exp(-grid) + np.exp(lam - 2 * grid)
        assert np.all(np.diff(g) < 0) or np.all(np.diff(g)[g[1:] > 0] < 0)


# ---------------------------------------------------------------------------
# prototype initialisation


def test_one_sample_per_class():
    f = np.arange(6.0).reshape(3, 2)
    W = init_prototypes(3, 2, f, np.array([2, 0, 1]))
    np.testing.assert_array_equal(W, f[[1, 2, 0]])


def test_random_fallback_is_seeded(caplog):
    a = init_prototypes(4, 3, seed=5)
    b = init_prototypes(4, 3, seed=5)
    np.testing.assert_array_equal(a, b)
    with caplog.at_level(logging.WARNING):
        W = init_prototypes(2, 3, np.ones((2, 3)), np.array([0, 0]), seed=5)
    assert "class 1" in caplog.text
    np.testing.assert_array_equal(W[0], np.ones(3))


def test_class_mean_uses_at_most_100_rows():
    f = np.vstack([np.zeros((100, 2)), np.ones((50, 2))])
    W = init_prototypes(1, 2, f, np.zeros(150, int))
    np.testing.assert_array_equal(W[0], [0.0, 0.0])


def test_sigmoid_symmetry():
    z = np.linspace(-40, 40, 81)
    np.testing.assert_allclose(sigmoid(z) + sigmoid(-z), 1.0, rtol=0, atol=1e-15)
