import numpy as np
import pytest

from ddpnopt.ddp_core import DDPOptions, backward_pass, forward_pass
from ddpnopt.errors import UnsupportedModeError
from ddpnopt.factorized import AllocationTracker, FactoredGain, factored_backward_pass
from ddpnopt.losses import cross_entropy_expansion, mse_expansion
from ddpnopt.network import Affine, Conv, LayerSpec, NetworkSpec, mlp, simulate
from ddpnopt.preconditioners import AdaptiveDiag, Identity, KroneckerGN

from conftest import random_weights

OPTS = DDPOptions(tikhonov_lambda=0.0)


def _both(net, w, x, y, pre, opts=OPTS):
    tr = simulate(net, w, x)
    term = cross_entropy_expansion(tr.xs[-1], y, rank1=True)
    dense = backward_pass(net, w, tr, term, [pre] * len(net), opts, record=True)
    fact = factored_backward_pass(net, w, tr, term, [pre] * len(net), opts, record=True)
    return tr, dense, fact


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("pre", [Identity(0.05), AdaptiveDiag(0.01), KroneckerGN(0.05, damping=0.1)],
                         ids=["identity", "diag", "kron"])
def test_factored_matches_dense_mlp(seed, pre):
    rng = np.random.default_rng(seed)
    net = mlp([5, 7, 6, 4], "tanh")
    w = random_weights(net, rng)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 4, 6)
    tr, dense, fact = _both(net, w, x, y, pre)
    for pd, pf in zip(dense.policies, fact.policies):
        assert isinstance(pf.K, FactoredGain)
        np.testing.assert_allclose(pf.k, pd.k, atol=1e-12)
        np.testing.assert_allclose(pf.K.matrix(), pd.K.matrix(), atol=1e-10)
    a = forward_pass(net, w, tr, dense.policies, x)
    b = forward_pass(net, w, tr, fact.policies, x)
    for ua, ub in zip(a.weights, b.weights):
        np.testing.assert_allclose(ub, ua, atol=1e-10)


def test_factored_matches_dense_conv(rng):
    net = NetworkSpec((LayerSpec(Conv(1, 2, 8, 8), "tanh"), LayerSpec(Affine(128, 3))))
    w = random_weights(net, rng, 0.3)
    x = rng.standard_normal((3, 64))
    y = np.array([0, 2, 1])
    tr, dense, fact = _both(net, w, x, y, Identity(0.1))
    for pd, pf in zip(dense.policies, fact.policies):
        np.testing.assert_allclose(pf.K.matrix(), pd.K.matrix(), atol=1e-10)
    a = forward_pass(net, w, tr, dense.policies, x)
    b = forward_pass(net, w, tr, fact.policies, x)
    for ua, ub in zip(a.weights, b.weights):
        np.testing.assert_allclose(ub, ua, atol=1e-10)


def test_lazy_gain_apply_matches_matrix(rng):
    net = mlp([4, 5, 3], "sigmoid")
    w = random_weights(net, rng)
    x = rng.standard_normal((4, 4))
    _, _, fact = _both(net, w, x, rng.integers(0, 3, 4), Identity(0.2))
    for p in fact.policies:
        dx = rng.standard_normal(p.K.shape[1])
        np.testing.assert_allclose(p.K.apply(dx), p.K.matrix() @ dx, atol=1e-13)


def test_factored_values_reconstruct_dense(rng):
    net = mlp([3, 5, 4, 2], "tanh")
    w = random_weights(net, rng)
    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 2, 5)
    _, dense, fact = _both(net, w, x, y, Identity(0.01))
    for t in range(len(net) + 1):
        fv, dv = fact.values[t], dense.values[t]
        np.testing.assert_allclose(fv.v_x, dv.v_x, atol=1e-12)
        np.testing.assert_allclose(fv.signs()[:, None, None] * np.einsum("bi,bj->bij", fv.z, fv.z), dv.v_xx,
                                   atol=1e-12)


def test_feedback_scale_carries_over(rng):
    net = mlp([3, 4, 2], "tanh")
    w = random_weights(net, rng)
    x = rng.standard_normal((3, 3))
    y = rng.integers(0, 2, 3)
    for g in (0.0, 0.5):
        _, dense, fact = _both(net, w, x, y, Identity(0.1), DDPOptions(tikhonov_lambda=0.0, feedback_scale=g))
        for pd, pf in zip(dense.policies, fact.policies):
            np.testing.assert_allclose(pf.K.matrix(), pd.K.matrix(), atol=1e-12)


def test_auxiliary_storage_is_linear_in_width(rng):
    peaks = []
    for width in (8, 16, 32):
        net = mlp([width, width, width], "tanh")
        w = random_weights(net, rng)
        x = rng.standard_normal((4, width))
        tr = simulate(net, w, x)
        tracker = AllocationTracker()
        res = factored_backward_pass(net, w, tr, mse_expansion(tr.xs[-1], np.zeros((4, width)), rank1=True),
                                     [Identity(0.1)] * 2, OPTS, tracker=tracker)
        m = net.layers[1].num_params
        peaks.append(tracker.peak(1))
        # nothing of size m * n (a dense K or Q_ux) is ever held
        assert tracker.peak(1) <= m
        assert res.policies[1].K.stored_size() == 2 * 4 * width


def test_unsupported_modes(rng):
    net = mlp([3, 4, 2], "tanh")
    w = random_weights(net, rng)
    x = rng.standard_normal((2, 3))
    tr = simulate(net, w, x)
    with pytest.raises(UnsupportedModeError):
        factored_backward_pass(net, w, tr, cross_entropy_expansion(tr.xs[-1], [0, 1]), [Identity(0.1)] * 2, OPTS)
    with pytest.raises(UnsupportedModeError):
        factored_backward_pass(net, w, tr, cross_entropy_expansion(tr.xs[-1], [0, 1], rank1=True),
                               [Identity(0.1)] * 2, DDPOptions(second_order_dynamics=True, tikhonov_lambda=0.0))


def test_negative_value_hessian_keeps_its_sign(rng):
    net = mlp([3, 5, 4, 2], "tanh")
    w = random_weights(net, rng)
    x = rng.standard_normal((5, 3))
    _, dense, fact = _both(net, w, x, rng.integers(0, 2, 5), AdaptiveDiag(0.05))
    assert np.any(fact.values[2].signs() < 0)
    for t in range(len(net) + 1):
        fv, dv = fact.values[t], dense.values[t]
        np.testing.assert_allclose(fv.v_x, dv.v_x, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(fv.signs()[:, None, None] * np.einsum("bi,bj->bij", fv.z, fv.z), dv.v_xx,
                                   rtol=1e-9, atol=1e-9)
