import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynae.errors import NonFiniteError, ShapeError
from dynae.ndmath import (AdamState, FeedForwardNet, Rng, adam_step, finite_diff_check,
                          load_net, mlp_backward, mlp_forward, relative_error, save_net)


def naive_forward(weights, biases, x, act):
    """Loop-by-loop forward pass used as an independent oracle."""
    a = list(x)
    for l, (W, b) in enumerate(zip(weights, biases)):
        last = l == len(weights) - 1
        out = []
        for j in range(W.shape[1]):
            s = b[j] + sum(a[i] * W[i, j] for i in range(W.shape[0]))
            if not last:
                s = max(s, 0.0) if act == "relu" else np.tanh(s)
            out.append(s)
        a = out
    return np.array(a)


def half_sq(out):
    return 0.5 * float(np.sum(out * out)), out


def test_zero_net_gives_zero_output():
    net = FeedForwardNet([3, 5, 2], seed=1)
    for p in net.params():
        p[...] = 0.0
    assert np.array_equal(net(np.ones((4, 3))), np.zeros((4, 2)))


def test_identity_layer():
    net = FeedForwardNet([2, 2])
    net.weights[0][...] = np.eye(2)
    net.biases[0][...] = 0.0
    assert np.allclose(net(np.array([1.0, 2.0])), [1.0, 2.0], atol=0, rtol=0)


def test_relu_net_matches_loop_oracle():
    net = FeedForwardNet([2, 4, 3, 1], seed=0)
    x = np.array([0.5, -0.5])
    ref = naive_forward(net.weights, net.biases, x, "relu")
    assert np.allclose(net(x), ref, rtol=0, atol=1e-12)


def test_batched_and_single_agree():
    net = FeedForwardNet([3, 6, 2], activation="tanh", seed=4)
    X = Rng(2).normal((5, 3))
    assert np.allclose(net(X), np.stack([net(x) for x in X]), atol=1e-14)


def test_wrong_input_width_raises():
    with pytest.raises(ShapeError):
        FeedForwardNet([3, 2])(np.zeros((2, 4)))


def test_backward_zero_upstream():
    net = FeedForwardNet([3, 4, 2], seed=3)
    grads, dx = mlp_backward(net, np.ones((2, 3)), np.zeros((2, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_backward_linear_layer_outer_product():
    net = FeedForwardNet([3, 2], seed=5)
    x = np.array([1.0, -2.0, 0.5])
    u = np.array([0.3, -1.1])
    grads, dx = mlp_backward(net, x, u)
    assert np.allclose(grads[0], np.outer(x, u))
    assert np.allclose(grads[1], u)
    assert np.allclose(dx, net.weights[0] @ u)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_central_differences(seed):
    rng = Rng(seed)
    dims = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))]
    net = FeedForwardNet(dims, activation="tanh", seed=seed)
    x = rng.normal((3, dims[0]))
    rep = finite_diff_check(net, x, half_sq, h=1e-6, tol=1e-4)
    assert rep.passed, rep
    # input gradient, checked independently
    _, dx = mlp_backward(net, x, net(x))
    h = 1e-6
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (half_sq(net(xp))[0] - half_sq(net(xm))[0]) / (2 * h)
            assert relative_error(dx[i, j], fd) < 1e-4


def test_finite_diff_quadratic_linear_net_is_tight():
    net = FeedForwardNet([3, 2], seed=8)
    rep = finite_diff_check(net, Rng(1).normal((4, 3)), half_sq)
    assert rep.passed and rep.max_rel_error < 1e-8


def test_finite_diff_flags_relu_kink():
    net = FeedForwardNet([2, 3, 1], seed=0)
    rep = finite_diff_check(net, np.zeros((1, 2)), half_sq)
    assert rep.nondifferentiable
    assert rep.passed


def test_forward_tangent_matches_jvp():
    net = FeedForwardNet([2, 5, 5, 2], activation="tanh", seed=2)
    x = Rng(0).normal((4, 2))
    v = Rng(1).normal((4, 2))
    out, dout, _ = net.forward_tangent(x, v)
    h = 1e-6
    fd = (net(x + h * v) - net(x - h * v)) / (2 * h)
    assert np.allclose(out, net(x))
    assert np.allclose(dout, fd, atol=1e-8)


def test_backward_tangent_matches_finite_differences():
    net = FeedForwardNet([2, 4, 2], activation="tanh", seed=6)
    x = Rng(3).normal((3, 2))
    v = Rng(4).normal((3, 2))
    go, gd = Rng(5).normal((3, 2)), Rng(6).normal((3, 2))

    def objective():
        o, do, _ = net.forward_tangent(x, v)
        return float(np.sum(go * o) + np.sum(gd * do))

    _, _, cache = net.forward_tangent(x, v)
    grads = net.backward_tangent(cache, go, gd)
    h = 1e-6
    for p, g in zip(net.params(), grads):
        for j in range(p.size):
            flat = p.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = objective()
            flat[j] = orig - h
            fm = objective()
            flat[j] = orig
            assert relative_error(g.reshape(-1)[j], (fp - fm) / (2 * h)) < 1e-5


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.for_params(p)
    adam_step(p, [np.zeros(2)], st_)
    assert np.array_equal(p[0], [1.0, -2.0])
    assert np.all(st_.m[0] == 0) and np.all(st_.v[0] == 0)


def test_adam_moments_decay_under_zero_gradient():
    p = [np.zeros(2)]
    st_ = AdamState.for_params(p)
    st_.m[0][...] = 1.0
    st_.v[0][...] = 1.0
    adam_step(p, [np.zeros(2)], st_)
    assert np.allclose(st_.m[0], 0.9) and np.allclose(st_.v[0], 0.999)


def test_adam_first_step_size():
    g = np.array([0.5, -3.0, 1e-3])
    p = [np.zeros(3)]
    st_ = AdamState.for_params(p, learning_rate=1e-3)
    adam_step(p, [g.copy()], st_)
    assert np.allclose(p[0], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_descends_square():
    w = [np.array([1.0])]
    st_ = AdamState.for_params(w, learning_rate=1e-2)
    prev = w[0][0] ** 2
    for _ in range(10):
        adam_step(w, [2 * w[0]], st_)
        assert w[0][0] ** 2 < prev
        prev = w[0][0] ** 2


@pytest.mark.parametrize("lr", [1e-3, 1e-2, 1e-1])
@pytest.mark.parametrize("a", [0.5, 1.0, 10.0])
def test_adam_monotone_on_quadratics(lr, a):
    # far enough from the optimum that 100 steps of size ~lr cannot overshoot
    w = [np.array([20.0])]
    st_ = AdamState.for_params(w, learning_rate=lr)
    prev = a * w[0][0] ** 2
    for _ in range(100):
        adam_step(w, [2 * a * w[0]], st_)
        f = a * w[0][0] ** 2
        assert f < prev
        prev = f


def test_adam_rejects_nonfinite_gradient():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.for_params(p))
    assert np.array_equal(p[0], np.zeros(2))


def test_same_seed_same_network():
    a, b = FeedForwardNet([3, 8, 2], seed=11), FeedForwardNet([3, 8, 2], seed=11)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert np.array_equal(Rng(7).normal(5), Rng(7).normal(5))


def test_checkpoint_round_trip(tmp_path):
    net = FeedForwardNet([4, 6, 3], activation="tanh", seed=9)
    save_net(net, tmp_path / "net", extra={"note": "x"})
    back, manifest = load_net(tmp_path / "net")
    assert manifest["layer_dims"] == [4, 6, 3]
    assert manifest["activations"] == ["tanh", "identity"]
    assert manifest["note"] == "x"
    assert (tmp_path / "net.bin").stat().st_size == 4 * net.parameter_count()
    for p, q in zip(net.params(), back.params()):
        assert np.array_equal(p.astype(np.float32).astype(np.float64), q)
    json.loads((tmp_path / "net.json").read_text())


def test_flat_params_round_trip():
    net = FeedForwardNet([2, 3, 1], seed=1)
    flat = net.flat_params()
    other = FeedForwardNet([2, 3, 1], seed=2)
    other.load_params(flat)
    assert np.array_equal(other.flat_params(), flat)
    assert np.array_equal(mlp_forward(other, np.ones(2)), mlp_forward(net, np.ones(2)))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=4), st.integers(0, 2**32 - 1))
def test_property_tanh_gradients(dims, seed):
    net = FeedForwardNet(dims, activation="tanh", seed=seed)
    x = Rng(seed).normal((2, dims[0]))
    assert finite_diff_check(net, x, half_sq, h=1e-6).passed
