import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpnopt.errors import InfeasibleDimensionError, ShapeError
from ddpnopt.losses import (CrossEntropyLoss, MMCLoss, MSELoss, cross_entropy_expansion, default_mmc_radius,
                            make_loss, make_mm_centers, mmc_expansion, mmc_predict, mse_expansion, softmax)

from conftest import central_diff


def _check_expansion(fn, x, *args):
    """Gradient and Hessian of each sample's value against central differences."""
    e = fn(x, *args)
    for i in range(x.shape[0]):
        val = lambda z: fn(z[None], args[0][i:i + 1], *args[1:]).value[0]
        grad = lambda z: fn(z[None], args[0][i:i + 1], *args[1:]).phi_x[0]
        np.testing.assert_allclose(e.phi_x[i], central_diff(val, x[i])[0], atol=1e-7)
        np.testing.assert_allclose(e.hessian[i], central_diff(grad, x[i]), atol=1e-7)


def test_mse_expansion(rng):
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    _check_expansion(mse_expansion, x, y)
    e = mse_expansion(x, y)
    np.testing.assert_allclose(e.value, 0.5 * np.sum((x - y) ** 2, axis=1))


def test_cross_entropy_expansion(rng):
    x = rng.standard_normal((4, 5))
    y = np.array([0, 4, 2, 2])
    _check_expansion(cross_entropy_expansion, x, y)


def test_cross_entropy_is_stable_for_large_logits():
    e = cross_entropy_expansion(np.array([[1000.0, 0.0, -1000.0]]), np.array([1]))
    assert np.isfinite(e.value[0]) and abs(e.value[0] - 1000.0) < 1e-9
    assert np.all(np.isfinite(e.hessian))


def test_cross_entropy_hessian_has_null_direction(rng):
    e = cross_entropy_expansion(rng.standard_normal((2, 4)), np.array([1, 3]))
    np.testing.assert_allclose(e.hessian @ np.ones(4), 0.0, atol=1e-14)


def test_mmc_expansion(rng):
    centers = make_mm_centers(4, 5, radius=2.0)
    x = rng.standard_normal((3, 5))
    y = np.array([0, 3, 1])
    _check_expansion(lambda z, lab: mmc_expansion(z, lab, centers), x, y)


def test_rank1_terminal_factor_is_the_gradient(rng):
    x = rng.standard_normal((3, 4))
    e = cross_entropy_expansion(x, np.array([0, 1, 2]), rank1=True)
    assert e.rank1 and e.hessian is None
    np.testing.assert_array_equal(e.z, e.phi_x)
    np.testing.assert_allclose(e.dense_hessian()[1], np.outer(e.phi_x[1], e.phi_x[1]))


def test_softmax_sums_to_one(rng):
    p = softmax(rng.standard_normal((5, 7)) * 30)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_label_checks():
    with pytest.raises(ShapeError):
        cross_entropy_expansion(np.zeros((2, 3)), np.array([0]))
    with pytest.raises(ValueError):
        cross_entropy_expansion(np.zeros((1, 3)), np.array([3]))
    with pytest.raises(ShapeError):
        mse_expansion(np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(L=st.integers(2, 12), extra=st.integers(0, 4), radius=st.floats(0.5, 20.0))
def test_mm_centers_are_equiangular(L, extra, radius):
    c = make_mm_centers(L, L - 1 + extra, radius)
    mu = c.centers
    np.testing.assert_allclose(np.linalg.norm(mu, axis=1), radius, rtol=1e-10)
    G = mu @ mu.T / radius ** 2
    off = G[~np.eye(L, dtype=bool)]
    np.testing.assert_allclose(off, -1.0 / (L - 1), atol=1e-10)


def test_mm_centers_infeasible_dimension():
    with pytest.raises(InfeasibleDimensionError):
        make_mm_centers(5, 3)


def test_default_mmc_radius():
    assert default_mmc_radius(10) == 10.0
    assert default_mmc_radius(4) == 1.0
    assert make_mm_centers(3, 12).radius == 10.0


def test_mmc_predicts_nearest_center():
    c = make_mm_centers(3, 2, radius=1.0)
    x = c.centers * 0.9
    np.testing.assert_array_equal(mmc_predict(x, c), [0, 1, 2])
    assert MMCLoss(c).accuracy(x, np.array([0, 1, 2])) == 1.0


def test_loss_factory():
    assert isinstance(make_loss("ce", 3, 3), CrossEntropyLoss)
    assert isinstance(make_loss("mse", 3, 3), MSELoss)
    assert isinstance(make_loss("mmc", 3, 4), MMCLoss)
    with pytest.raises(ValueError):
        make_loss("hinge", 3, 3)


def test_mse_loss_uses_one_hot_targets():
    x = np.array([[1.0, 0.0, 0.0]])
    assert MSELoss().value(x, np.array([0]))[0] == 0.0
    assert MSELoss().value(x, np.array([1]))[0] == 1.0
