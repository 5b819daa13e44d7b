import math

import mpmath
import numpy as np
import pytest

from conftest import random_dense_net
from maarcert.errors import CheckpointError, ConfigError, ShapeError, UnsupportedOpError
from maarcert.nn import (
    Adam,
    Dense,
    LayeredNetwork,
    ReLU,
    SGDMomentum,
    StepSchedule,
    checkpoint,
    cross_entropy,
    forward,
    grad_params,
    grad_wrt_activation,
    init_network,
    optimizer_step,
    predict,
    softmax,
)
from maarcert.nn import autodiff as ad
from oracles import naive_forward

mpmath.mp.dps = 50


def identity_net(relu=False):
    layers = [Dense(np.eye(2), np.zeros(2))]
    if relu:
        layers += [ReLU(), Dense(np.eye(2), np.zeros(2))]
    return LayeredNetwork(layers, (2,))


# -- forward / predict ---------------------------------------------------------
def test_forward_identity():
    np.testing.assert_array_equal(forward(identity_net(), np.array([1.0, -1.0])), [1.0, -1.0])


def test_forward_dense_relu():
    net = LayeredNetwork([Dense(np.eye(2), np.zeros(2)), ReLU()], (2,))
    # a trailing ReLU is not a logit layer in practice, but the map itself is still defined
    np.testing.assert_array_equal(net.forward_from(np.array([1.0, -1.0])), [1.0, 0.0])


def test_forward_matches_naive_dense(rng):
    net = random_dense_net(3, [2, 4, 3])
    for _ in range(10):
        x = rng.uniform(size=2)
        np.testing.assert_allclose(forward(net, x), naive_forward(net, x), rtol=1e-12, atol=1e-12)


def test_forward_matches_naive_conv(small_conv_net, rng):
    for _ in range(3):
        x = rng.uniform(size=(1, 6, 6))
        np.testing.assert_allclose(forward(small_conv_net, x), naive_forward(small_conv_net, x), rtol=1e-11, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(identity_net(), np.zeros(3))


def test_forward_bit_deterministic(small_conv_net, rng):
    x = rng.uniform(size=(4, 1, 6, 6))
    a = forward(small_conv_net, x)
    b = forward(init_network([("conv", 3, 3, 2, 1), ("conv", 2, 3, 1, 1), ("dense", 5), ("dense", 4)], (1, 6, 6), 3), x)
    c = forward(small_conv_net, x)
    assert a.tobytes() == c.tobytes()
    assert b.shape == a.shape


def test_predict_examples():
    net = identity_net()
    assert predict(net, np.array([0.1, 0.9])) == 1
    assert predict(net, np.array([0.5, 0.5])) == 0


def test_predict_is_argmax_of_forward(rng):
    net = random_dense_net(9, [3, 5, 4])
    X = rng.uniform(size=(50, 3))
    np.testing.assert_array_equal(predict(net, X), np.argmax(forward(net, X), axis=1))


# -- softmax / cross-entropy --------------------------------------------------------
def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1000.0, 1000.0, 1000.0]), [1 / 3] * 3, rtol=1e-15)


def test_softmax_high_precision():
    z = [1, 2, 3]
    den = sum(mpmath.e**v for v in z)
    ref = [float(mpmath.e**v / den) for v in z]
    np.testing.assert_allclose(softmax(np.array(z, dtype=float)), ref, rtol=1e-15)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([1.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-11)
    # the 1e-12 floor moves the analytic value by about 2e-12
    assert cross_entropy(np.array([0.5, 0.5]), 1) == pytest.approx(math.log(2), abs=1e-11)
    with pytest.raises(IndexError):
        cross_entropy(np.array([0.5, 0.5]), 2)


def test_cross_entropy_high_precision(rng):
    for _ in range(20):
        p = rng.dirichlet(np.ones(5))
        y = int(rng.integers(5))
        ref = float(-mpmath.log(mpmath.mpf(p[y]) + mpmath.mpf("1e-12")))
        assert cross_entropy(p, y) == pytest.approx(ref, rel=1e-13)


# -- gradients ----------------------------------------------------------------
def fd_check(net, loss_of_net, h=1e-4):
    grads = grad_params(net, lambda g, _: loss_of_net(g))
    params = dict(net.named_parameters(trainable_only=True))
    worst = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_of_net(None).value
            arr[idx] = old - h
            dn = loss_of_net(None).value
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            err = abs(grads[name][idx] - fd) - (1e-6 + 1e-4 * abs(fd))
            worst = max(worst, err)
    return grads, worst


def test_grad_closed_form_half_squared_norm():
    x = np.array([[0.3, -0.7]])
    net = LayeredNetwork([Dense(np.eye(2), np.zeros(2))], (2,))
    g = grad_params(net, lambda gn, _: ad.mul(ad.sum(ad.mul(gn.forward(x), gn.forward(x))), 0.5))
    # d/dW 0.5 ||W x||^2 = (W x) x^T = x x^T at W = I
    np.testing.assert_allclose(g["0.weight"], np.outer(x[0], x[0]), rtol=1e-15)
    np.testing.assert_allclose(g["0.bias"], x[0], rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_grad_matches_finite_differences(seed):
    net = random_dense_net(seed, [3, 6, 5, 3])
    r = np.random.default_rng(seed)
    X = r.uniform(size=(4, 3))
    Y = r.integers(0, 3, size=4)

    def loss(gnet):
        out = gnet.forward(X) if gnet is not None else net.graph_forward(X)
        return ad.mean(cross_entropy(ad.softmax(out), Y))

    _, worst = fd_check(net, loss)
    assert worst <= 0


def test_grad_conv_matches_finite_differences(small_conv_net):
    r = np.random.default_rng(1)
    X = r.uniform(size=(2, 1, 6, 6))
    Y = np.array([1, 3])

    def loss(gnet):
        out = gnet.forward(X) if gnet is not None else small_conv_net.graph_forward(X)
        return ad.mean(cross_entropy(ad.softmax(out), Y))

    _, worst = fd_check(small_conv_net, loss)
    assert worst <= 0


def test_frozen_layer_has_no_gradient_entry():
    net = random_dense_net(0, [2, 3, 2])
    net.freeze_blocks(1)
    g = grad_params(net, lambda gn, _: ad.sum(gn.forward(np.ones((1, 2)))))
    assert set(g) == {"2.weight", "2.bias"}


def test_unsupported_op_in_closure():
    net = identity_net()
    with pytest.raises(UnsupportedOpError):
        grad_params(net, lambda gn, _: float(gn.forward(np.ones((1, 2))).value.sum()))
    with pytest.raises(UnsupportedOpError):
        ad.as_var("not a tensor")


def test_grad_wrt_activation_residual():
    net = identity_net()
    x = np.array([0.2, -0.4])
    target = np.array([1.0, 1.0])
    g = grad_wrt_activation(net, 0, x, lambda z: ad.mul(ad.sum(ad.mul(ad.sub(z, target), ad.sub(z, target))), 0.5))
    np.testing.assert_allclose(g, x - target, rtol=1e-15)


def test_grad_wrt_activation_zero_at_stationary_point():
    net = identity_net()
    x = np.array([1.0, 1.0])
    g = grad_wrt_activation(net, 0, x, lambda z: ad.mul(ad.sum(ad.mul(ad.sub(z, x), ad.sub(z, x))), 0.5))
    assert np.linalg.norm(g) < 1e-8


def test_grad_wrt_activation_finite_differences(rng):
    net = random_dense_net(4, [3, 6, 6, 4])
    y = np.array([2])
    h = rng.uniform(size=6)

    def suffix_loss(v):
        return cross_entropy(softmax(net.forward_from(v, 1)), 2)

    g = grad_wrt_activation(net, 1, h, lambda z: ad.sum(cross_entropy(ad.softmax(z), y)))
    for i in range(6):
        e = np.zeros(6)
        e[i] = 1e-5
        fd = (suffix_loss(h + e) - suffix_loss(h - e)) / 2e-5
        assert abs(g[i] - fd) <= 1e-6 + 1e-4 * abs(fd)


# -- optimisers ---------------------------------------------------------------------
def test_sgd_plain_step():
    net = identity_net()
    before = net.layers[0].weight.copy()
    g = np.full((2, 2), 0.5)
    optimizer_step(SGDMomentum(0.1, momentum=0.0), net, {"0.weight": g}, epoch=0)
    np.testing.assert_array_equal(net.layers[0].weight, before - 0.1 * g)


def test_schedule_arithmetic():
    s = StepSchedule(start=60, factor=0.5, period=10)
    assert s.rate(0.03, 85) == 0.03 * 0.5**3
    assert s.rate(0.03, 59) == 0.03
    assert StepSchedule().rate(0.1, 1000) == 0.1


def test_adam_single_step_high_precision():
    p0, g0, lr = mpmath.mpf("0.7"), mpmath.mpf("-0.3"), mpmath.mpf("0.001")
    b1, b2, eps = mpmath.mpf("0.9"), mpmath.mpf("0.999"), mpmath.mpf("1e-8")
    m = (1 - b1) * g0
    v = (1 - b2) * g0**2
    ref = p0 - lr * (m / (1 - b1)) / (mpmath.sqrt(v / (1 - b2)) + eps)
    params = {"p": np.array([0.7])}
    Adam(0.001).step(params, {"p": np.array([-0.3])}, 0)
    assert params["p"][0] == pytest.approx(float(ref), rel=1e-15)


def test_optimizer_rejects_nonpositive_rate():
    with pytest.raises(ConfigError):
        Adam(0.0)
    with pytest.raises(ConfigError):
        SGDMomentum(-1.0)


def test_adam_buffers_mirror_parameters(small_conv_net):
    opt = Adam(0.01)
    grads = {n: np.ones_like(a) for n, a in small_conv_net.named_parameters()}
    optimizer_step(opt, small_conv_net, grads, 0)
    for name, arr in small_conv_net.named_parameters():
        assert opt.buffers[name][0].shape == arr.shape == opt.buffers[name][1].shape


def test_freeze_contract_bit_identical():
    net = random_dense_net(2, [3, 4, 4, 2])
    net.freeze_blocks(1)
    frozen = [a.copy() for n, a in net.named_parameters() if n.startswith("0.")]
    opt = SGDMomentum(0.1)
    X = np.random.default_rng(0).uniform(size=(5, 3))
    for epoch in range(5):
        g = grad_params(net, lambda gn, _: ad.sum(ad.mul(gn.forward(X), gn.forward(X))))
        optimizer_step(opt, net, g, epoch)
    after = [a for n, a in net.named_parameters() if n.startswith("0.")]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(frozen, after))


def test_freeze_must_be_prefix():
    net = random_dense_net(0, [2, 3, 2])
    net.layers[2].frozen = True
    with pytest.raises(ShapeError):
        net._check_freeze_order()


# -- checkpoints ----------------------------------------------------------------------
def test_checkpoint_round_trip_bytes(tmp_path, small_conv_net):
    small_conv_net.freeze_blocks(1)
    text = checkpoint.dumps(small_conv_net, {"seed": 3})
    again = checkpoint.dumps(checkpoint.loads(text), {"seed": 3})
    assert text == again
    path = tmp_path / "net.json"
    checkpoint.save(small_conv_net, path, {"stage": 0})
    loaded = checkpoint.load(path)
    assert checkpoint.load_meta(path)["stage"] == 0
    assert loaded.frozen_blocks() == 1
    x = np.random.default_rng(0).uniform(size=(1, 6, 6))
    assert forward(loaded, x).tobytes() == forward(small_conv_net, x).tobytes()


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "absent.json")


def test_init_is_seeded():
    a = checkpoint.dumps(init_network([("dense", 4), ("dense", 2)], (3,), 11))
    b = checkpoint.dumps(init_network([("dense", 4), ("dense", 2)], (3,), 11))
    c = checkpoint.dumps(init_network([("dense", 4), ("dense", 2)], (3,), 12))
    assert a == b != c
