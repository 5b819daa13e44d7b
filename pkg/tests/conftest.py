import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from maarcert.nn import init_network  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk-scale experiment")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dense_net(seed, sizes, bias_scale=0.3):
    """Seeded dense/ReLU net with nonzero biases (so ReLUs actually cross)."""
    arch = [("dense", s) for s in sizes[1:]]
    net = init_network(arch, (sizes[0],), seed)
    r = np.random.default_rng(seed + 7)
    for layer in net.layers:
        if layer.kind == "dense":
            layer.bias[:] = r.normal(scale=bias_scale, size=layer.bias.shape)
    return net


@pytest.fixture
def small_conv_net():
    net = init_network([("conv", 3, 3, 2, 1), ("conv", 2, 3, 1, 1), ("dense", 5), ("dense", 4)], (1, 6, 6), 3)
    r = np.random.default_rng(0)
    for layer in net.layers:
        if layer.kind != "relu":
            layer.bias[:] = r.normal(scale=0.1, size=layer.bias.shape)
    return net
