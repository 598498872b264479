import math

import numpy as np
import pytest

from phenotrace.nn import (
    Adam,
    DenseNet,
    Layer,
    adam_step,
    backward,
    derive_seed,
    forward,
    grad_check,
    load_checkpoint,
    make_rng,
    save_checkpoint,
    sigmoid,
    triplet_margin_loss,
    weighted_bce,
)


def net_loss(net, X, upstream):
    """Scalar <upstream, net(X)> and its parameter gradients."""
    def fn(params):
        out, cache = forward(net, X)
        return float((out * upstream).sum()), backward(net, cache, upstream)[1]
    return fn


def test_rng_is_reproducible():
    assert np.array_equal(make_rng(5).random(10), make_rng(5).random(10))
    assert not np.array_equal(make_rng(5).random(10), make_rng(6).random(10))
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert derive_seed(1, "a") != derive_seed(2, "a")


def test_identity_layer_passes_input_through():
    net = DenseNet([Layer(np.eye(3), np.zeros(3), "identity")])
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(net(x), x)


def test_relu_blocks_negative_preactivation():
    net = DenseNet([Layer(np.array([[1.0]]), np.array([0.0]), "relu")])
    out, cache = forward(net, np.array([[-2.0]]))
    assert out[0, 0] == 0
    gx, grads = backward(net, cache, np.array([[1.0]]))
    assert gx[0, 0] == 0 and grads[0][0, 0] == 0


def test_layer_shape_validation():
    with pytest.raises(ValueError):
        Layer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        DenseNet([Layer(np.zeros((2, 3)), np.zeros(2)), Layer(np.zeros((2, 3)), np.zeros(2))])
    with pytest.raises(ValueError):
        DenseNet.init([3, 4], ["relu"], make_rng(0))(np.zeros((1, 5)))


def test_small_net_gradients(rng):
    net = DenseNet.init([5, 4, 3], ["relu", "sigmoid"], rng)
    X = rng.normal(size=(7, 5))
    up = rng.normal(size=(7, 3))
    assert grad_check(net_loss(net, X, up), net.params()) < 1e-6


def test_input_gradient(rng):
    net = DenseNet.init([4, 6, 2], ["relu", "identity"], rng)
    X = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 2))

    def fn(params):
        out, cache = forward(net, params[0])
        return float((out * up).sum()), [backward(net, cache, up)[0]]

    assert grad_check(fn, [X]) < 1e-6


# ---------------------------------------------------------------- losses


def test_triplet_examples():
    a = np.zeros(2)
    loss, _ = triplet_margin_loss(a, a, np.array([2.0, 0.0]), margin=1.0)
    assert loss == 0
    loss, _ = triplet_margin_loss(a, np.array([2.0, 0.0]), np.array([1.0, 0.0]), margin=1.0)
    assert loss == 2


def test_triplet_zero_distance_subgradient():
    a = np.ones(3)
    loss, (ga, gp, gn) = triplet_margin_loss(a, a, a, margin=1.0)
    assert loss == 1.0
    assert np.all(np.isfinite(ga)) and np.all(gp == 0) and np.all(gn == 0)


def test_triplet_gradient(rng):
    a, p, n = (rng.normal(size=(6, 4)) for _ in range(3))

    def fn(params):
        loss, grads = triplet_margin_loss(*params, margin=1.5)
        return loss, list(grads)

    assert grad_check(fn, [a, p, n]) < 1e-6


def test_triplet_bounds(rng):
    for _ in range(200):
        a, p, n = rng.normal(size=(3, 5))
        m = float(rng.uniform(0.1, 3))
        loss, _ = triplet_margin_loss(a, p, n, m)
        assert 0 <= loss <= np.linalg.norm(a - p) + m + 1e-12


def test_bce_examples():
    assert weighted_bce(np.array([0.0]), np.array([1]), 1.0)[0] == pytest.approx(math.log(2))
    loss, grad = weighted_bce(np.array([30.0, 800.0]), np.array([1, 1]))
    assert 0 <= loss < 1e-12 and np.all(np.isfinite(grad))
    loss, _ = weighted_bce(np.array([-800.0]), np.array([1]))
    assert loss == pytest.approx(800.0)


def test_bce_positive_weight_scales_positives_only():
    z = np.array([0.3, -0.2])
    y = np.array([1, 0])
    base = weighted_bce(z, y, 1.0)[0]
    pos_part = math.log1p(math.exp(-0.3))
    assert weighted_bce(z, y, 3.0)[0] == pytest.approx(base + 2 * pos_part / 2)


def test_bce_gradient(rng):
    z = rng.normal(size=9)
    y = rng.integers(0, 2, 9)

    def fn(params):
        loss, g = weighted_bce(params[0], y, 2.5)
        return loss, [g]

    assert grad_check(fn, [z]) < 1e-6


def test_sigmoid_is_stable():
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    assert sigmoid(0.0) == 0.5


# ---------------------------------------------------------------- optimiser


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, 2.0])]
    Adam().step(p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, 2.0])


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([0.0, 0.0])]
    Adam(lr=0.01).step(p, [np.array([3.0, -0.5])])
    assert p[0] == pytest.approx([-0.01, 0.01], rel=1e-6)


def test_adam_descends_quadratic():
    x = [np.array([1.0])]
    opt = Adam(lr=0.1)
    for _ in range(100):
        opt.step(x, [2 * x[0]])
    assert abs(x[0][0]) < 0.2


def test_adam_step_functional_form():
    p = [np.array([1.0])]
    new, state = adam_step(p, [np.array([1.0])], Adam(lr=0.5))
    assert state.t == 1 and new[0][0] == pytest.approx(0.5)


def test_adam_rejects_mismatched_gradients():
    opt = Adam()
    p = [np.zeros(2)]
    opt.step(p, [np.zeros(2)])
    with pytest.raises(ValueError):
        opt.step(p, [np.zeros(3)])


def test_adam_weight_decay_skips_biases():
    W, b = np.ones((2, 2)), np.ones(2)
    Adam(lr=0.1, weight_decay=0.5).step([W, b], [np.zeros((2, 2)), np.zeros(2)])
    assert np.allclose(W, 0.95) and np.array_equal(b, np.ones(2))


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_quadratic_exact():
    def fn(params):
        x = params[0]
        return float((x**2).sum()), [2 * x]

    assert grad_check(fn, [np.array([0.3, -1.2, 2.0])]) < 1e-8


def test_grad_check_detects_wrong_gradient():
    def fn(params):
        x = params[0]
        return float((x**2).sum()), [3 * x]

    assert grad_check(fn, [np.array([0.3, -1.2])]) > 0.1


def test_grad_check_restores_params_and_samples():
    x = np.arange(10.0)

    def fn(params):
        return float((params[0] ** 3).sum()), [3 * params[0] ** 2]

    before = x.copy()
    assert grad_check(fn, [x], max_coords=3, rng=make_rng(1)) < 1e-6
    assert np.array_equal(x, before)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    a = DenseNet.init([4, 3, 2], ["relu", "identity"], rng)
    path = save_checkpoint(tmp_path / "m.json", {"embedder": a}, "abc", {"lr": 0.1}, {"note": 1})
    doc = load_checkpoint(path)
    b = doc["networks"]["embedder"]
    X = rng.normal(size=(5, 4))
    assert np.array_equal(a(X), b(X))
    assert doc["registry_hash"] == "abc" and doc["config"] == {"lr": 0.1} and doc["extra"] == {"note": 1}


def test_checkpoint_version_guard(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"v": 99, "networks": {}}')
    with pytest.raises(ValueError):
        load_checkpoint(p)
