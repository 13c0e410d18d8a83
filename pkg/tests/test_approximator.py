import math

import numpy as np
import pytest

from sauna.approximator import (
    ActorCritic,
    AdamState,
    DenseNet,
    GaussianPolicy,
    adam_step,
    clip_by_global_norm,
    load_checkpoint,
    save_checkpoint,
)
from sauna.exceptions import ConfigurationError, UsageError


def central_diff(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        assert np.all(np.abs(a - n) / scale < rtol), np.max(np.abs(a - n) / scale)


def hand_forward(x, weights, biases, output="identity"):
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = np.zeros(w.shape[1])
        for j in range(w.shape[1]):
            z[j] = sum(h[k] * w[k, j] for k in range(w.shape[0])) + b[j]
        last = i == len(weights) - 1
        h = np.tanh(z) if (not last or output == "tanh") else z
    return h


def test_zero_net_outputs_zero():
    net = DenseNet([3, 5, 2])
    assert np.array_equal(net.forward(np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_linear_layer():
    net = DenseNet([3, 3])
    net.weights[0][...] = np.eye(3)
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(net.forward(x), x)


def test_forward_matches_hand_oracle():
    rng = np.random.default_rng(1)
    net = DenseNet([4, 6, 5, 2], rng=rng)
    for b in net.biases:
        b[...] = rng.normal(size=b.shape)
    x = rng.normal(size=4)
    expected = hand_forward(x, net.weights, net.biases)
    np.testing.assert_allclose(net.forward(x), expected, rtol=1e-12, atol=0)


def test_forward_is_pure():
    net = DenseNet([3, 8, 2], rng=np.random.default_rng(0))
    x = np.array([0.1, 0.2, 0.3])
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_forward_dimension_mismatch():
    net = DenseNet([3, 2])
    with pytest.raises(ConfigurationError):
        net.forward(np.ones(4))


def test_backward_before_forward():
    with pytest.raises(UsageError):
        DenseNet([2, 2]).backward(np.ones(2))


def test_linear_backward_closed_form():
    rng = np.random.default_rng(3)
    net = DenseNet([3, 2], rng=rng)
    x = rng.normal(size=3)
    g = rng.normal(size=2)
    net.forward(x)
    (dw, db), dx = net.backward(g)
    np.testing.assert_allclose(dw, np.outer(x, g))
    np.testing.assert_allclose(db, g)
    np.testing.assert_allclose(dx, net.weights[0] @ g)


def test_zero_upstream_gives_zero_gradient():
    net = DenseNet([3, 4, 2], rng=np.random.default_rng(0))
    net.forward(np.ones(3))
    grads, _ = net.backward(np.zeros(2))
    assert all(not np.any(g) for g in grads)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("output", ["identity", "tanh"])
def test_backward_matches_finite_differences(seed, output):
    rng = np.random.default_rng(seed)
    net = DenseNet([3, 5, 4, 2], output_activation=output, rng=rng)
    x = rng.normal(size=(7, 3))
    up = rng.normal(size=(7, 2))

    def f():
        return float(np.sum(net.forward(x, cache=False) * up))

    net.forward(x)
    grads, dx = net.backward(up)
    assert_grads_close(grads, central_diff(f, net.params))

    def fx():
        return float(np.sum(net.forward(xv, cache=False) * up))

    xv = x.copy()
    assert_grads_close([dx], central_diff(fx, [xv]))


def test_log_prob_at_mode_and_entropy():
    d = 3
    pol = GaussianPolicy(DenseNet([2, d]), d, log_std_init=0.0)
    logp, ent = pol.log_prob_and_entropy(np.zeros(2), np.zeros(d))
    assert logp == pytest.approx(-d / 2 * math.log(2 * math.pi), abs=1e-12)
    sigma = np.array([0.5, 1.0, 2.0])
    pol.log_std = np.log(sigma)
    _, ent = pol.log_prob_and_entropy(np.zeros(2), np.zeros(d))
    assert ent == pytest.approx(np.sum(0.5 + 0.5 * math.log(2 * math.pi) + np.log(sigma)))


def test_log_std_clamped():
    pol = GaussianPolicy(DenseNet([1, 1]), 1, log_std_init=50.0)
    assert np.isfinite(pol.std).all()
    assert pol.std[0] == pytest.approx(math.exp(2.0))
    pol.log_std[...] = -500.0
    assert pol.std[0] > 0


@pytest.mark.parametrize("seed", range(5))
def test_log_prob_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy(DenseNet([3, 4, 2], rng=rng), 2, log_std_init=-0.3)
    pol.log_std += rng.normal(scale=0.2, size=2)
    s = rng.normal(size=(5, 3))
    a = rng.normal(size=(5, 2))
    w = rng.normal(size=5)

    def f():
        logp, ent = pol.log_prob_and_entropy(s, a)
        return float(np.sum(w * logp) + 0.7 * ent)

    pol.log_prob_and_entropy(s, a)
    grads, _ = pol.backward(w, 0.7)
    assert_grads_close(grads, central_diff(f, pol.params))


def test_adam_zero_gradient_is_noop():
    p = [np.array([3.0, 4.0]), np.array([[1.0]])]
    adam_step(p, [np.zeros(2), np.zeros((1, 1))], AdamState(lr=0.1))
    assert np.array_equal(p[0], [3.0, 4.0]) and p[1][0, 0] == 1.0


def test_adam_moments_decay_under_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = AdamState(lr=0.1)
    adam_step(p, [np.array([1.0, 1.0])], state)
    m, v = np.abs(state.m).sum(), state.v.sum()
    adam_step(p, [np.zeros(2)], state)
    assert np.abs(state.m).sum() < m and state.v.sum() < v
    assert state.step == 2


def test_adam_first_step_is_lr_sign():
    g = np.array([0.3, -5.0, 1e-3])
    p = [np.zeros(3)]
    adam_step(p, [g], AdamState(lr=0.01))
    # |g| / (|g| + eps) differs from 1 by at most eps/|g|
    np.testing.assert_allclose(p[0], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_constant_gradient_steps_approach_lr():
    g = np.array([2.0, -0.5])
    p = [np.zeros(2)]
    state = AdamState(lr=1e-3)
    prev = p[0].copy()
    for _ in range(2000):
        adam_step(p, [g], state)
        step = p[0] - prev
        prev = p[0].copy()
        assert np.all(np.abs(step) <= 1e-3 * (1 + 1e-6))
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_rejects_nonfinite():
    p = [np.ones(2)]
    state = AdamState()
    assert not adam_step(p, [np.array([np.nan, 1.0])], state)
    assert state.rejected == 1 and state.step == 0
    assert np.array_equal(p[0], [1.0, 1.0])


def test_clip_by_global_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.sqrt(sum(float(g @ g) for g in clipped)) == pytest.approx(1.0, rel=1e-5)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


def test_checkpoint_roundtrip(tmp_path):
    nets = ActorCritic(3, 1, rng=np.random.default_rng(0))
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, nets.named_arrays(), nets.architecture())
    data = path.read_bytes()
    assert data[:8] == b"SAUNACK1"
    arrays, meta = load_checkpoint(path)
    assert meta["layer_sizes"]["policy"] == [3, 64, 64, 1]
    other = ActorCritic(3, 1, rng=np.random.default_rng(1))
    other.load_arrays(arrays)
    for k, v in nets.named_arrays().items():
        assert np.array_equal(other.named_arrays()[k], v)


def test_value_and_vex_read_same_trunk():
    nets = ActorCritic(3, 1, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 3))
    feats = nets.critic.trunk.forward(x, cache=False)
    v, e = nets.critic.predict(x)
    np.testing.assert_array_equal(v, nets.critic.value_head.forward(feats, cache=False)[:, 0])
    np.testing.assert_array_equal(e, nets.critic.vex_head.forward(feats, cache=False)[:, 0])


def test_untrained_vex_head_is_near_zero():
    nets = ActorCritic(3, 1, rng=np.random.default_rng(0))
    _, e = nets.critic.predict(np.random.default_rng(1).normal(size=(100, 3)))
    assert np.all(np.abs(e) < 0.1)
