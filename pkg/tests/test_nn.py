import numpy as np
import pytest

from quantemu.nn import (
    AdamState,
    Layer,
    Mlp,
    adam_step,
    backward,
    clone_weights,
    forward,
    load_model,
    loss_cross_entropy,
    loss_squared,
    save_model,
    sgd_step,
)


def straight_line_eval(net, x):
    """Independent evaluation: explicit loops, no shared helpers."""
    a = list(map(float, x))
    for layer in net.layers:
        z = []
        for i in range(layer.W.shape[0]):
            s = float(layer.b[i])
            for j in range(layer.W.shape[1]):
                s += float(layer.W[i, j]) * a[j]
            z.append(s)
        if layer.activation == "relu":
            a = [max(v, 0.0) for v in z]
        elif layer.activation == "sigmoid":
            a = [1.0 / (1.0 + np.exp(-v)) for v in z]
        else:
            a = z
    return np.array(a)


def random_net(sizes, acts, seed):
    net = Mlp.init(sizes, acts, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for l in net.layers:
        l.b = rng.normal(scale=0.3, size=l.b.shape)
    return net


def fd_check(net, loss_of_net, grads, eps=1e-5):
    """Max relative error between analytic and central-difference gradients."""
    worst = 0.0
    for layer, (dW, db) in zip(net.layers, grads):
        for P, G in ((layer.W, dW), (layer.b, db)):
            it = np.nditer(P, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = P[idx]
                P[idx] = old + eps
                fp = loss_of_net()
                P[idx] = old - eps
                fm = loss_of_net()
                P[idx] = old
                num = (fp - fm) / (2 * eps)
                denom = max(abs(num), abs(G[idx]), 1e-7)
                worst = max(worst, abs(num - G[idx]) / denom)
    return worst


def test_zero_net_zero_output():
    net = Mlp([Layer(np.zeros((3, 2)), np.zeros(3), "linear"), Layer(np.zeros((2, 3)), np.zeros(2), "linear")])
    assert not np.any(net(np.array([1.0, -2.0])))


def test_single_linear_layer_is_matvec():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
    net = Mlp([Layer(W, b, "linear")])
    np.testing.assert_allclose(net(x), W @ x + b, rtol=1e-15)


def test_forward_matches_straight_line():
    net = random_net([3, 7, 5], ["relu", "linear"], 1)
    rng = np.random.default_rng(1)
    for x in rng.normal(size=(20, 3)):
        np.testing.assert_allclose(net(x), straight_line_eval(net, x), rtol=1e-12, atol=1e-14)
    X = rng.normal(size=(6, 3))
    np.testing.assert_allclose(net(X), np.array([net(x) for x in X]), rtol=1e-13, atol=1e-15)


def test_forward_errors():
    net = random_net([3, 4], ["linear"], 0)
    with pytest.raises(ValueError):
        net(np.zeros(2))
    with pytest.raises(ValueError):
        net(np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        Mlp([Layer(np.zeros((3, 2)), np.zeros(3)), Layer(np.zeros((2, 4)), np.zeros(2))])


def test_zero_output_gradient():
    net = random_net([3, 5, 2], None, 2)
    _, cache = forward(net, np.ones((4, 3)))
    for dW, db in backward(net, cache, np.zeros((4, 2))):
        assert not np.any(dW) and not np.any(db)


@pytest.mark.parametrize(
    "sizes,acts",
    [
        ([3, 6, 4], ["relu", "linear"]),
        ([4, 5, 5, 3], ["sigmoid", "relu", "linear"]),
        ([2, 8, 25], ["relu", "linear"]),
        ([6, 9, 9, 9, 25], ["relu", "relu", "relu", "linear"]),
    ],
)
def test_backward_finite_differences(sizes, acts):
    net = random_net(sizes, acts, 3)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, sizes[0]))
    T = rng.normal(size=(5, sizes[-1]))

    def L():
        return loss_squared(forward(net, X)[0], T)[0]

    out, cache = forward(net, X)
    grads = backward(net, cache, loss_squared(out, T)[1])
    assert fd_check(net, L, grads) <= 1e-5


def test_cross_entropy_gradient_fd():
    net = random_net([4, 10, 6], ["relu", "linear"], 4)
    rng = np.random.default_rng(4)
    X = rng.normal(size=(8, 4))
    y = rng.integers(0, 6, size=8)

    def L():
        return loss_cross_entropy(forward(net, X)[0], y)[0]

    out, cache = forward(net, X)
    grads = backward(net, cache, loss_cross_entropy(out, y)[1])
    assert fd_check(net, L, grads) <= 1e-5


def test_loss_values():
    v, g = loss_cross_entropy(np.zeros(25), 3)
    assert v == pytest.approx(np.log(25))
    v, g = loss_squared(np.ones(3), np.ones(3))
    assert v == 0 and not np.any(g)
    with pytest.raises(ValueError):
        loss_cross_entropy(np.zeros(4), 4)


def test_loss_gradients_vs_fd():
    rng = np.random.default_rng(5)
    z, y = rng.normal(size=7), 2
    _, g = loss_cross_entropy(z, y)
    p, t = rng.normal(size=5), rng.normal(size=5)
    _, gs = loss_squared(p, t)
    for i in range(7):
        e = np.zeros(7)
        e[i] = 1e-6
        num = (loss_cross_entropy(z + e, y)[0] - loss_cross_entropy(z - e, y)[0]) / 2e-6
        assert abs(num - g[i]) <= 1e-5 * max(abs(num), 1e-3)
    for i in range(5):
        e = np.zeros(5)
        e[i] = 1e-6
        num = (loss_squared(p + e, t)[0] - loss_squared(p - e, t)[0]) / 2e-6
        assert abs(num - gs[i]) <= 1e-5 * abs(num)


def test_least_squares_closed_form():
    rng = np.random.default_rng(6)
    W, b = rng.normal(size=(2, 3)), rng.normal(size=2)
    X, Y = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
    net = Mlp([Layer(W.copy(), b.copy(), "linear")])
    out, cache = forward(net, X)
    (dW, db), = backward(net, cache, loss_squared(out, Y)[1])
    R = X @ W.T + b - Y
    np.testing.assert_allclose(dW, 2 * R.T @ X / 10, rtol=1e-12)
    np.testing.assert_allclose(db, 2 * R.sum(axis=0) / 10, rtol=1e-12)


def test_stale_cache():
    net = random_net([2, 3], ["linear"], 0)
    _, cache = forward(net, np.ones(2))
    sgd_step(net, [(np.zeros((3, 2)), np.zeros(3))], 0.1)
    with pytest.raises(ValueError):
        backward(net, cache, np.ones(3))


def scalar_net(w):
    return Mlp([Layer(np.array([[w]]), np.zeros(1), "linear")])


def test_sgd_and_adam():
    net = scalar_net(1.0)
    sgd_step(net, [(np.array([[2.0]]), np.zeros(1))], 0.0)
    assert net.layers[0].W[0, 0] == 1.0
    sgd_step(net, [(np.array([[2.0]]), np.zeros(1))], 0.1)
    assert net.layers[0].W[0, 0] == pytest.approx(0.8)
    net = scalar_net(1.0)
    state = AdamState.zeros_like(net)
    prev = 1.0
    for _ in range(100):
        w = net.layers[0].W[0, 0]
        adam_step(net, [(np.array([[2 * w]]), np.zeros(1))], state, lr=1e-3)
        cur = abs(net.layers[0].W[0, 0])
        assert cur < prev
        prev = cur
    with pytest.raises(FloatingPointError):
        sgd_step(net, [(np.array([[np.inf]]), np.zeros(1))], 0.1)


def test_clone():
    net = random_net([3, 6, 4], None, 7)
    c = clone_weights(net)
    for p, q in zip(net.params(), c.params()):
        assert np.array_equal(p, q)
    c.layers[0].W[0, 0] += 1.0
    assert net.layers[0].W[0, 0] != c.layers[0].W[0, 0]
    c = clone_weights(net)
    X = np.random.default_rng(7).normal(size=(100, 3))
    assert np.array_equal(net(X), c(X))


def test_determinism():
    a, b = Mlp.init([4, 20, 25], seed=9), Mlp.init([4, 20, 25], seed=9)
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)


def test_save_load_roundtrip(tmp_path):
    net = random_net([4, 12, 25], ["sigmoid", "linear"], 8)
    save_model(net, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.seed == net.seed
    for l1, l2 in zip(net.layers, back.layers):
        assert np.array_equal(l1.W, l2.W) and np.array_equal(l1.b, l2.b)
        assert l1.activation == l2.activation


def test_separable_grid_classification():
    """25-way classification of grid directions from noiseless features."""
    from quantemu.supervised import Dataset, train_classifier

    rng = np.random.default_rng(10)
    grid = np.array([[a, b] for a in range(-2, 3) for b in range(-2, 3)], float) * 0.05
    labels = rng.integers(0, 25, size=2000)
    feats = grid[labels] + rng.uniform(-0.02, 0.02, size=(2000, 2))
    ds = Dataset(feats, labels)
    model, acc = train_classifier(ds, 25, hidden=(64,), epochs=200, batch_size=64, seed=0)
    assert acc >= 0.99
