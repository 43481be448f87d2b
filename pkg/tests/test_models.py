import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedspa.errors import InvalidParameter
from fedspa.mechanism import ClipSpec
from fedspa.models import (ModelSpec, accuracy, grad_per_sample, init_params, loss, losses, mean_loss,
                           minibatch_grad, per_sample_grads)


def fd_grad(spec, theta, x, y, h=1e-5):
    g = np.zeros_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (loss(spec, theta + e, (x, y)) - loss(spec, theta - e, (x, y))) / (2 * h)
    return g


def random_instance(kind, seed):
    rng = np.random.default_rng(seed)
    i, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    h = int(rng.integers(1, 5)) if kind == "mlp1" else 0
    spec = ModelSpec(kind, i, c, h)
    theta = rng.standard_normal(spec.param_dim)
    return spec, theta, rng.standard_normal(i), int(rng.integers(c))


def reference_loss(spec, theta, x, y):
    # plain-Python forward pass
    i, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    t = list(theta)
    if spec.kind == "logreg":
        z = [sum(x[a] * t[a * c + k] for a in range(i)) + t[i * c + k] for k in range(c)]
    else:
        o2, ob1 = i * h, i * h + h * c
        hid = [max(0.0, sum(x[a] * t[a * h + u] for a in range(i)) + t[ob1 + u]) for u in range(h)]
        z = [sum(hid[u] * t[o2 + u * c + k] for u in range(h)) + t[ob1 + h + k] for k in range(c)]
    m = max(z)
    return -(z[y] - m - math.log(sum(math.exp(v - m) for v in z)))


def test_param_dim_and_layout():
    assert ModelSpec("logreg", 784, 10).param_dim == 7850
    spec = ModelSpec("mlp1", 3, 2, 4)
    assert spec.param_dim == 3 * 4 + 4 * 2 + 4 + 2
    W1, W2, b1, b2 = spec.unpack(np.arange(spec.param_dim, dtype=float))
    assert W1.shape == (3, 4) and W2.shape == (4, 2) and b1[0] == 20 and b2[-1] == 25


@pytest.mark.parametrize("args", [("cnn", 3, 2, 0), ("logreg", 3, 1, 0), ("logreg", 3, 2, 4), ("mlp1", 3, 2, 0)])
def test_spec_validation(args):
    with pytest.raises(InvalidParameter):
        ModelSpec(*args)


def test_uniform_loss_at_zero():
    for c in (2, 3, 10):
        spec = ModelSpec("logreg", 4, c)
        assert loss(spec, np.zeros(spec.param_dim), (np.ones(4), 1)) == pytest.approx(math.log(c), rel=1e-14)


def test_saturated_margin_gives_zero_loss():
    spec = ModelSpec("logreg", 1, 2)
    theta = np.array([0.0, 0.0, -400.0, 400.0])  # bias toward class 1
    assert loss(spec, theta, (np.zeros(1), 1)) < 1e-300
    assert loss(spec, theta, (np.zeros(1), 0)) == pytest.approx(800.0)


@pytest.mark.parametrize("kind", ["logreg", "mlp1"])
def test_loss_matches_reference(kind):
    for seed in range(20):
        spec, theta, x, y = random_instance(kind, seed)
        assert loss(spec, theta, (x, y)) == pytest.approx(reference_loss(spec, theta, x, y), rel=1e-10, abs=1e-12)


def test_bias_gradient_at_zero_weights():
    spec = ModelSpec("logreg", 3, 4)
    g = grad_per_sample(spec, np.zeros(spec.param_dim), (np.array([1.0, -2.0, 0.5]), 2))
    want = np.full(4, 0.25)
    want[2] -= 1
    np.testing.assert_allclose(g[12:], want, atol=1e-15)


@pytest.mark.parametrize("kind", ["logreg", "mlp1"])
def test_gradient_matches_finite_differences(kind):
    for seed in range(100):
        spec, theta, x, y = random_instance(kind, 1000 + seed)
        g = grad_per_sample(spec, theta, (x, y))
        num = fd_grad(spec, theta, x, y)
        rel = np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-8)
        assert rel < 1e-5, (seed, rel)


def test_duplicate_sample_has_same_gradient():
    spec, theta, x, y = random_instance("mlp1", 7)
    G = per_sample_grads(spec, theta, np.stack([x, x]), [y, y])
    np.testing.assert_array_equal(G[0], G[1])
    np.testing.assert_allclose(G[0], grad_per_sample(spec, theta, (x, y)), rtol=1e-14, atol=1e-15)


def test_minibatch_of_identical_samples():
    spec, theta, x, y = random_instance("logreg", 3)
    g = minibatch_grad(spec, theta, (np.stack([x] * 5), [y] * 5))
    np.testing.assert_allclose(g, grad_per_sample(spec, theta, (x, y)), rtol=1e-15, atol=1e-15)


def test_minibatch_hand_average():
    # 1 feature, 2 classes; theta = (w0, w1, b0, b1) = 0, so softmax = (1/2, 1/2)
    spec = ModelSpec("logreg", 1, 2)
    X = np.array([[2.0], [-1.0]])
    y = np.array([0, 1])
    # sample 1: dz = (-1/2, 1/2), grad = (2 dz, dz); sample 2: dz = (1/2, -1/2), grad = (-dz, dz)
    want = 0.5 * (np.array([-1.0, 1.0, -0.5, 0.5]) + np.array([-0.5, 0.5, 0.5, -0.5]))
    np.testing.assert_allclose(minibatch_grad(spec, np.zeros(4), (X, y)), want, atol=1e-15)


@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_clipped_minibatch_is_bounded(seed, c):
    spec, theta, _, _ = random_instance("mlp1", seed)
    rng = np.random.default_rng(seed)
    X = 5 * rng.standard_normal((6, spec.input_dim))
    y = rng.integers(spec.num_classes, size=6)
    g = minibatch_grad(spec, theta, (X, y), ClipSpec(c, spec.param_dim))
    assert np.all(np.abs(g) <= c + 1e-15)


def test_minibatch_rejects_empty_batch():
    spec = ModelSpec("logreg", 2, 2)
    with pytest.raises(InvalidParameter):
        minibatch_grad(spec, np.zeros(spec.param_dim), (np.zeros((0, 2)), np.zeros(0, dtype=int)))


def test_label_and_shape_validation():
    spec = ModelSpec("logreg", 2, 3)
    theta = np.zeros(spec.param_dim)
    with pytest.raises(InvalidParameter):
        losses(spec, theta, np.zeros((1, 2)), [3])
    with pytest.raises(InvalidParameter):
        losses(spec, theta, np.zeros((1, 4)), [0])
    with pytest.raises(InvalidParameter):
        losses(spec, np.zeros(5), np.zeros((1, 2)), [0])


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_logreg_loss_is_convex_along_lines(seed, lam):
    spec, a, x, y = random_instance("logreg", seed)
    b = np.random.default_rng(seed + 1).standard_normal(spec.param_dim)
    mix = loss(spec, lam * a + (1 - lam) * b, (x, y))
    assert mix <= lam * loss(spec, a, (x, y)) + (1 - lam) * loss(spec, b, (x, y)) + 1e-9


def test_accuracy_and_mean_loss():
    spec = ModelSpec("logreg", 1, 2)
    theta = np.array([-1.0, 1.0, 0.0, 0.0])  # predicts class 1 for x > 0
    X = np.array([[1.0], [2.0], [-1.0], [-3.0]])
    assert accuracy(spec, theta, X, [1, 1, 0, 1]) == 0.75
    assert mean_loss(spec, theta, X, [1, 1, 0, 0]) == pytest.approx(np.mean(losses(spec, theta, X, [1, 1, 0, 0])))


def test_init_params():
    assert not init_params(ModelSpec("logreg", 3, 2)).any()
    spec = ModelSpec("mlp1", 3, 2, 4)
    a = init_params(spec, 1, 0.1)
    np.testing.assert_array_equal(a, init_params(spec, 1, 0.1))
    assert a[:20].any() and not a[20:].any()
