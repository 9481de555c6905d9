import numpy as np
import pytest

from prunelab import autograd as ag
from prunelab.autograd import FdConfig, LeafId, Var
from prunelab.tensor import SeededRng


def test_backward_sum_is_ones():
    w = Var(SeededRng(1).normal((7,)))
    grads = ag.backward(ag.vsum(w), {LeafId("w", "weight"): w})
    assert np.array_equal(grads[LeafId("w", "weight")], np.ones(7))


def test_backward_half_norm_sq_is_w():
    data = SeededRng(2).normal((5,))
    w = Var(data)
    loss = ag.mul_const(ag.vsum(ag.mul(w, w)), 0.5)
    grads = ag.backward(loss, {LeafId("w", "weight"): w})
    assert np.abs(grads[LeafId("w", "weight")] - data).max() <= 1e-15


def test_backward_rejects_non_scalar():
    w = Var(np.ones(3))
    with pytest.raises(ValueError):
        ag.backward(ag.mul(w, w), {LeafId("w", "weight"): w})


def test_backward_untouched_leaf_gets_zeros():
    w = Var(np.ones(3))
    other = Var(np.ones((2, 2)))
    grads = ag.backward(ag.vsum(w), {LeafId("w", "weight"): w,
                                     LeafId("o", "weight"): other})
    assert np.array_equal(grads[LeafId("o", "weight")], np.zeros((2, 2)))


def _mlp_loss(params, x, y):
    """20-parameter two-layer net, returns (loss Var, leaves)."""
    w1 = Var(params[:6].reshape(2, 3))
    b1 = Var(params[6:9])
    w2 = Var(params[9:15].reshape(3, 2))
    b2 = Var(params[15:17])
    scale = Var(params[17:20])
    h = ag.relu(ag.add(ag.matmul(Var(x), w1), b1))
    h = ag.mul(h, scale)
    logits = ag.add(ag.matmul(h, w2), b2)
    loss = ag.cross_entropy(logits, y)
    leaves = {LeafId(n, "weight"): v for n, v in
              [("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2), ("s", scale)]}
    return loss, leaves


def _flat_grads(leaves_grads):
    order = ["w1", "b1", "w2", "b2", "s"]
    return np.concatenate([leaves_grads[LeafId(n, "weight")].reshape(-1)
                           for n in order])


def test_backward_matches_coordinate_fd():
    rng = SeededRng(33)
    params = rng.stream("p").normal((20,), 0.0, 0.8)
    x = rng.stream("x").normal((8, 2))
    y = np.asarray(rng.stream("y").integers(0, 2, size=8))
    loss, leaves = _mlp_loss(params, x, y)
    exact = _flat_grads(ag.backward(loss, leaves))
    eps = 1e-6
    fd = np.zeros(20)
    for i in range(20):
        pp, pm = params.copy(), params.copy()
        pp[i] += eps
        pm[i] -= eps
        lp, _ = _mlp_loss(pp, x, y)
        lm, _ = _mlp_loss(pm, x, y)
        fd[i] = (float(lp.data) - float(lm.data)) / (2 * eps)
    rel = np.abs(exact - fd) / np.maximum(np.abs(fd), 1e-8)
    assert rel.max() <= 1e-6


def test_cross_entropy_uniform_logits():
    for c in (2, 5, 10):
        logits = Var(np.zeros((4, c)))
        loss = ag.cross_entropy(logits, np.zeros(4, dtype=int))
        assert abs(float(loss.data) - np.log(c)) <= 1e-12


def test_relu_subgradient_zero_at_kink():
    w = Var(np.array([0.0, -1.0, 2.0]))
    grads = ag.backward(ag.vsum(ag.relu(w)), {LeafId("w", "weight"): w})
    assert np.array_equal(grads[LeafId("w", "weight")], np.array([0.0, 0.0, 1.0]))


def test_broadcast_add_bias_gradient():
    x = Var(np.ones((4, 3)))
    b = Var(np.zeros(3))
    grads = ag.backward(ag.vsum(ag.add(x, b)), {LeafId("b", "weight"): b})
    assert np.array_equal(grads[LeafId("b", "weight")], np.full(3, 4.0))


def test_conv_grads_match_fd():
    rng = SeededRng(44)
    x0 = rng.stream("x").normal((2, 2, 5, 5))
    k0 = rng.stream("k").normal((3, 2, 3, 3))

    def loss_at(xv, kv):
        x, k = Var(xv), Var(kv)
        out = ag.conv2d(x, k, stride=1, pad=1)
        return ag.vsum(ag.mul(out, out)), x, k

    loss, x, k = loss_at(x0, k0)
    grads = ag.backward(loss, {LeafId("x", "weight"): x, LeafId("k", "weight"): k})
    eps = 1e-6
    for leaf, arr in (("x", x0), ("k", k0)):
        flat = arr.reshape(-1)
        idx = SeededRng(7).stream(leaf).integers(0, flat.size, size=12)
        for i in idx:
            p, m = arr.copy().reshape(-1), arr.copy().reshape(-1)
            p[i] += eps
            m[i] -= eps
            lp = loss_at(p.reshape(arr.shape) if leaf == "x" else x0,
                         k0 if leaf == "x" else p.reshape(arr.shape))[0]
            lm = loss_at(m.reshape(arr.shape) if leaf == "x" else x0,
                         k0 if leaf == "x" else m.reshape(arr.shape))[0]
            fd = (float(lp.data) - float(lm.data)) / (2 * eps)
            got = grads[LeafId(leaf, "weight")].reshape(-1)[i]
            assert abs(got - fd) / max(abs(fd), 1e-8) <= 1e-5


# ---- directional second derivatives ----

def _quad_grad(a):
    return lambda w: a @ w


def test_directional_second_derivative_exact_on_quadratic():
    rng = SeededRng(8)
    a = rng.stream("a").normal((6, 6))
    a = a @ a.T + 6 * np.eye(6)
    w0 = rng.stream("w").normal((6,))
    v = rng.stream("v").normal((6,))
    hv = ag.directional_second_derivative(_quad_grad(a), w0, v)
    assert np.abs(hv - a @ v).max() <= 1e-9


def test_directional_second_derivative_mask_independent_loss():
    # gradient field constant in the perturbed variable -> zero response
    out = ag.directional_second_derivative(lambda g: np.array([1.0, 2.0]),
                                           np.ones(2), np.ones(2))
    assert np.array_equal(out, np.zeros(2))


def test_directional_linearity_on_quadratic():
    rng = SeededRng(9)
    a = rng.stream("a").normal((5, 5))
    a = a @ a.T + 5 * np.eye(5)
    w0 = rng.stream("w").normal((5,))
    d1 = rng.stream("d1").normal((5,))
    d2 = rng.stream("d2").normal((5,))
    f = _quad_grad(a)
    lhs = ag.directional_second_derivative(f, w0, 2.0 * d1 + 0.5 * d2)
    rhs = (2.0 * ag.directional_second_derivative(f, w0, d1)
           + 0.5 * ag.directional_second_derivative(f, w0, d2))
    assert np.abs(lhs - rhs).max() / np.abs(rhs).max() <= 1e-6


def test_directional_symmetry_on_smooth_loss():
    # <d2, H d1> == <d1, H d2> for the exact gradient of a smooth scalar
    rng = SeededRng(10)
    x = rng.stream("x").normal((12, 3))

    def grad(w):
        r = np.tanh(x @ w)
        return x.T @ ((1 - r ** 2) * r) / x.shape[0]

    w0 = rng.stream("w").normal((3,))
    d1 = rng.stream("d1").normal((3,))
    d2 = rng.stream("d2").normal((3,))
    h1 = ag.directional_second_derivative(grad, w0, d1)
    h2 = ag.directional_second_derivative(grad, w0, d2)
    assert abs(d2 @ h1 - d1 @ h2) / max(abs(d1 @ h2), 1e-12) <= 1e-6


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FdConfig(eps_base=0.0)


def test_eps_scaled_by_direction_norm():
    seen = []

    def grad(w):
        seen.append(w.copy())
        return w

    big = np.array([1e6, 0.0])
    ag.directional_second_derivative(grad, np.zeros(2), big, FdConfig(1e-4))
    step = np.abs(seen[0]).max()
    assert step == pytest.approx(1e-4 / 1e6 * 1e6)  # eps*|d| == eps_base
