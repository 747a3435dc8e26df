import numpy as np
import pytest

from ddpnopt.network import LayerSpec, NetworkSpec, mlp


def central_diff(f, x, h=1e-6):
    """Central-difference Jacobian of ``f`` (array-valued) at the flat vector ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h))
    return np.stack(cols, axis=-1)


def random_weights(net: NetworkSpec, rng, scale=0.6):
    return [scale * rng.standard_normal(l.num_params) for l in net.layers]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net():
    return mlp([4, 6, 5, 3], "tanh", "identity")
