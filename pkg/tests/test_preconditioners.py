import numpy as np
import pytest

from ddpnopt.errors import NumericalError, ShapeError
from ddpnopt.network import Affine, Conv
from ddpnopt.preconditioners import (AdaptiveDiag, DenseCurvature, Identity, KroneckerGN, apply_inverse,
                                     make_preconditioner, update_stats)


def test_identity_scales():
    np.testing.assert_allclose(apply_inverse(Identity(0.1), [1.0, 2.0]), [0.1, 0.2])
    s = Identity(0.1)
    assert update_stats(s, None, None, None, np.ones(2)) is s


def test_adaptive_diag_examples():
    s = AdaptiveDiag(1.0, beta=0.0).update_stats(None, None, None, np.ones(3))
    np.testing.assert_array_equal(s.v, np.ones(3))
    s = AdaptiveDiag(1.0, beta=0.5).update_stats(None, None, None, np.zeros(2))
    s = s.update_stats(None, None, None, np.ones(2))
    np.testing.assert_array_equal(s.v, [0.5, 0.5])
    assert s.step_count == 2
    one = AdaptiveDiag(0.3, eps=0.0, v=np.ones(3))
    g = np.array([1.0, -2.0, 4.0])
    np.testing.assert_allclose(one.apply_inverse(g), Identity(0.3).apply_inverse(g))


def test_adaptive_diag_is_immutable_and_checks_shape():
    s0 = AdaptiveDiag(0.1)
    s1 = s0.update_stats(None, None, None, np.ones(3))
    assert s0.v is None and s1.v is not None
    with pytest.raises(ShapeError):
        s1.update_stats(None, None, None, np.ones(4))
    with pytest.raises(NumericalError):
        s0.apply_inverse(np.ones(3))


def _kron(rng, n_in=3, n_out=2, B=7, beta=0.95, damping=0.1, steps=1):
    layer = Affine(n_in, n_out)
    s = KroneckerGN(0.2, beta, damping)
    for _ in range(steps):
        x = rng.standard_normal((B, n_in))
        vh = rng.standard_normal((B, n_out))
        s = s.update_stats(layer, x, vh, None)
    return layer, s


@pytest.mark.parametrize("dims", [(2, 2), (3, 2), (5, 4), (5, 6)])
def test_kronecker_matches_dense_oracle(rng, dims):
    layer, s = _kron(rng, *dims, steps=3)
    Ad = s.A + s.damping * np.eye(s.A.shape[0])
    Bd = s.Bm + s.damping * np.eye(s.Bm.shape[0])
    M = np.kron(Ad, Bd) / s.eta  # acts on column-major vec([W | b])
    g = rng.standard_normal(layer.num_params)
    np.testing.assert_allclose(s.apply_inverse(g), np.linalg.solve(M, g), atol=1e-10)
    G = rng.standard_normal((layer.num_params, 3))
    np.testing.assert_allclose(s.apply_inverse(G), np.linalg.solve(M, G), atol=1e-10)


def test_kronecker_statistics(rng):
    layer = Affine(3, 2)
    x = rng.standard_normal((4, 3))
    vh = rng.standard_normal((4, 2))
    s = KroneckerGN(1.0, beta=0.5).update_stats(layer, x, vh, None)
    xa = np.hstack([x, np.ones((4, 1))])
    np.testing.assert_allclose(s.A, xa.T @ xa / 4)
    np.testing.assert_allclose(s.Bm, vh.T @ vh / 4)
    s2 = s.update_stats(layer, 2 * x, vh, None)
    xb = np.hstack([2 * x, np.ones((4, 1))])
    np.testing.assert_allclose(s2.A, 0.5 * s.A + 0.5 * xb.T @ xb / 4)


def test_kronecker_ema_fixed_point():
    layer = Affine(2, 1)
    x = np.zeros((3, 2))
    x[:, 0] = 1.0
    s = KroneckerGN(1.0, beta=0.5).update_stats(layer, np.zeros((3, 2)), np.ones((3, 1)), None)
    for _ in range(60):
        s = s.update_stats(layer, x, np.ones((3, 1)), None)
    xa = np.array([1.0, 0.0, 1.0])
    np.testing.assert_allclose(s.A, np.outer(xa, xa), atol=1e-15)


def test_kronecker_identity_factors(rng):
    s = KroneckerGN(0.3, damping=1e-300, A=np.eye(3), Bm=np.eye(2))
    g = rng.standard_normal(6)
    np.testing.assert_allclose(s.apply_inverse(g), 0.3 * g, rtol=1e-15)


def test_kronecker_conv_uses_patch_factor(rng):
    conv = Conv(1, 2, 4, 4)
    x = rng.standard_normal((3, 16))
    vh = rng.standard_normal((3, 32))
    s = KroneckerGN(0.1, damping=0.1).update_stats(conv, x, vh, None)
    assert s.A.shape == (10, 10) and s.Bm.shape == (2, 2)
    g = rng.standard_normal(conv.num_params)
    M = np.kron(s.A + 0.1 * np.eye(10), s.Bm + 0.1 * np.eye(2)) / 0.1
    np.testing.assert_allclose(s.apply_inverse(g), np.linalg.solve(M, g), atol=1e-10)


@pytest.mark.parametrize("kind", ["identity", "adaptive_diag", "kronecker"])
def test_apply_inverse_is_linear(rng, kind):
    layer = Affine(4, 3)
    s = make_preconditioner(kind, 0.1)
    s = s.update_stats(layer, rng.standard_normal((5, 4)), rng.standard_normal((5, 3)),
                       rng.standard_normal(layer.num_params))
    a, b = rng.standard_normal((2, layer.num_params))
    lhs = s.apply_inverse(2.5 * a + b)
    rhs = 2.5 * s.apply_inverse(a) + s.apply_inverse(b)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)
    assert np.all(np.isfinite(lhs))


def test_state_held_by_policy_does_not_change(rng):
    layer, s = _kron(rng)
    g = rng.standard_normal(layer.num_params)
    before = s.apply_inverse(g)
    s.update_stats(layer, rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), None)
    np.testing.assert_array_equal(s.apply_inverse(g), before)


def test_errors(rng):
    with pytest.raises(NumericalError):
        KroneckerGN(0.1).apply_inverse(np.ones(6))
    _, s = _kron(rng)
    with pytest.raises(ShapeError):
        s.apply_inverse(np.ones(5))
    with pytest.raises(NumericalError):
        Identity(0.1).apply_inverse(np.array([np.inf, 0.0]))
    with pytest.raises(NumericalError):
        DenseCurvature(1.0, np.zeros((2, 2))).apply_inverse(np.ones(2))
    with pytest.raises(ValueError):
        make_preconditioner("ekfac", 0.1)
