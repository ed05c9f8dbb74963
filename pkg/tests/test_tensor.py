import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dico import tensor as T
from dico.nn import (Adam, Mlp, clip_grad_norm, load_mlp, mlp_forward, mlp_forward_np, polyak_update,
                     read_npz, rng_stream, save_mlp, write_npz)
from dico.tensor import Tensor


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def assert_fd_close(build_loss, params, rtol=1e-4, atol=1e-8):
    analytic = T.grad(build_loss(), params)
    for p, g in zip(params, analytic):
        numeric = central_difference(lambda: build_loss().item(), p.data)
        err = np.abs(g - numeric) / np.maximum(np.abs(numeric), 1.0)
        assert np.all((err < rtol) | (np.abs(g - numeric) < atol)), (g, numeric)


def hand_rolled_forward(weights, biases, x):
    # explicit loops, no matmul
    h = [list(row) for row in x]
    for k, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for row in h:
            vals = []
            for j in range(W.shape[1]):
                s = b[j]
                for i in range(W.shape[0]):
                    s += row[i] * W[i, j]
                vals.append(np.tanh(s) if k < len(weights) - 1 else s)
            out.append(vals)
        h = out
    return np.array(h)


# --- forward ---------------------------------------------------------------------

def test_zero_weight_net_outputs_bias():
    net = Mlp([3, 5, 2], rng_stream(0, "t"))
    for p in net.params:
        p.data[...] = 0.0
    net.params[-1].data[:] = [0.25, -1.5]
    out = mlp_forward(net, np.random.default_rng(1).normal(size=(4, 3)))
    np.testing.assert_array_equal(out.data, np.tile([0.25, -1.5], (4, 1)))


def test_identity_linear_layer():
    net = Mlp([3, 3], params=[np.eye(3), np.zeros(3)])
    x = np.random.default_rng(2).normal(size=(6, 3))
    np.testing.assert_array_equal(net(x).data, x)


def test_forward_matches_hand_rolled_oracle():
    net = Mlp([4, 7, 5, 3], rng_stream(11, "oracle"))
    x = np.random.default_rng(3).normal(size=(5, 4))
    W = [p.data for p in net.params[0::2]]
    b = [p.data for p in net.params[1::2]]
    np.testing.assert_allclose(net(x).data, hand_rolled_forward(W, b, x), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(mlp_forward_np(net, x), net(x).data)


def test_forward_shape_mismatch():
    net = Mlp([4, 8, 2], rng_stream(0, "s"))
    with pytest.raises(ValueError):
        net(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        net(np.zeros(4))


def test_parameter_count_is_function_of_widths():
    for widths in ([2, 3], [4, 64, 64, 2], [1, 1, 1]):
        net = Mlp(widths, rng_stream(0, "c"))
        assert net.num_parameters() == sum(p.size for p in net.params)
        assert Mlp(widths, rng_stream(9, "c")).num_parameters() == net.num_parameters()


def test_bad_widths_rejected():
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 0, 2])


# --- backward ----------------------------------------------------------------------

def test_linear_loss_gradient_is_input():
    x = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.array([0.3, 0.1, -0.7]), requires_grad=True)
    (g,) = T.grad(T.tsum(w * x), [w])
    np.testing.assert_array_equal(g, x)


def test_constant_loss_gives_zero_gradients():
    w = Tensor(np.ones(3), requires_grad=True)
    (g,) = T.grad(T.as_tensor(np.array(4.0)), [w])
    np.testing.assert_array_equal(g, np.zeros(3))


def test_unreachable_parameter_gets_zero():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    ga, gb = T.grad(T.tsum(a * a), [a, b])
    np.testing.assert_array_equal(gb, 0.0)
    np.testing.assert_array_equal(ga, 2.0)


def test_backward_twice_without_new_forward_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(T.tanh(w) * 2.0)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(w * 2.0)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(w * 3.0)
    assert not y.requires_grad
    (g,) = T.grad(y, [w])
    np.testing.assert_array_equal(g, 0.0)


def test_stop_gradient_is_exactly_zero():
    w = Tensor(np.array([0.5, -1.0]), requires_grad=True)
    loss = T.tsum(T.stop_gradient(w * w) * w)
    (g,) = T.grad(loss, [w])
    np.testing.assert_array_equal(g, w.data * w.data)   # only the direct factor contributes


OPS = {
    "add_broadcast": lambda a, b: T.tsum(a + b[0]),
    "sub_mul": lambda a, b: T.tsum((a - b) * a),
    "div": lambda a, b: T.tsum(a / (b * b + 1.0)),
    "power": lambda a, b: T.tsum(T.power(b * b + 0.5, 1.7)),
    "square": lambda a, b: T.tsum(T.square(a)),
    "matmul": lambda a, b: T.tsum(T.tanh(T.matmul(a, T.reshape(b, (4, 3))))),
    "tanh": lambda a, b: T.tsum(T.tanh(a)),
    "exp": lambda a, b: T.tsum(T.exp(a * 0.5)),
    "log": lambda a, b: T.tsum(T.log(a * a + 0.1)),
    "sqrt": lambda a, b: T.tsum(T.sqrt(b * b + 0.2)),
    "softplus": lambda a, b: T.tsum(T.softplus(a * 3.0)),
    "relu": lambda a, b: T.tsum(T.relu(a) * b),
    "clip": lambda a, b: T.tsum(T.clip(a, -0.5, 0.5) * 2.0),
    "maximum": lambda a, b: T.tsum(T.maximum(a * b, 0.1 * b)),
    "minimum": lambda a, b: T.tsum(T.minimum(a, 0.1 * a + 0.3)),
    "mean": lambda a, b: T.mean(a * a, axis=0).sum(),
    "amax": lambda a, b: T.tsum(T.amax(a, axis=1) * T.amax(a, axis=1)),
    "norm": lambda a, b: T.tsum(T.norm(a, axis=-1)),
    "getitem": lambda a, b: T.tsum(a[1:, ::2] * a[:2, 1::2]),
    "concat": lambda a, b: T.tsum(T.tanh(T.concat([a, a * 2.0], axis=-1))),
    "stack": lambda a, b: T.tsum(T.stack([a, a * a], axis=0) * 0.5),
    "where": lambda a, b: T.tsum(T.where(a.data > 0, a * a, -a)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_differences_per_op(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    # keep away from kinks of relu/clip/max/min/amax by construction
    a = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.2, 1.2, size=(3, 4)), requires_grad=True)
    a.data[np.abs(np.abs(a.data) - 0.5) < 0.05] += 0.1
    b = Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)
    assert_fd_close(lambda: OPS[name](a, b), [a, b])


def test_finite_differences_every_mlp_layer():
    net = Mlp([3, 16, 16, 2], rng_stream(5, "fd"))
    x = np.random.default_rng(0).normal(size=(8, 3))
    y = np.random.default_rng(1).normal(size=(8, 2))
    assert_fd_close(lambda: T.mean(T.square(net(x) - y)), net.params)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_finite_differences_random_nets(seed, hidden, out):
    net = Mlp([2, hidden, out], rng_stream(seed, "prop"))
    x = np.random.default_rng(seed).normal(size=(4, 2))
    assert_fd_close(lambda: T.tsum(T.tanh(net(x))), net.params)


# --- Adam --------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.t == 1


def test_adam_first_step_closed_form():
    lr, eps = 1e-3, 1e-8
    g = np.array([1e-6, -3e-4, 2.0, -5e6, 1e9])
    p = Tensor(np.zeros_like(g), requires_grad=True)
    Adam([p], lr=lr, eps=eps).step([g])
    # bias-corrected moments equal g and g^2 after one step
    np.testing.assert_allclose(p.data, -lr * g / (np.abs(g) + eps), rtol=1e-12)
    np.testing.assert_allclose(p.data[-2:], -lr * np.sign(g[-2:]), rtol=1e-9)


def test_adam_rejects_non_finite_and_bad_shapes():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p])
    with pytest.raises(FloatingPointError):
        opt.step([np.array([np.nan, 0.0])])
    with pytest.raises(ValueError):
        opt.step([np.zeros(3)])
    assert opt.t == 0


def test_adam_step_counter_and_state_shapes():
    net = Mlp([2, 4, 1], rng_stream(0, "a"))
    opt = Adam(net.params)
    for k in range(3):
        opt.step([np.ones_like(p.data) for p in net.params])
        assert opt.t == k + 1
    assert [m.shape for m in opt.m] == [p.shape for p in net.params]


def _train(seed, steps=20):
    net = Mlp([3, 8, 1], rng_stream(seed, "init"))
    opt = Adam(net.params, lr=1e-2)
    data = rng_stream(seed, "data")
    for _ in range(steps):
        x = data.normal(size=(16, 3))
        loss = T.mean(T.square(net(x) - x[:, :1] * 0.5))
        grads, _ = clip_grad_norm(T.grad(loss, net.params), 1.0)
        opt.step(grads)
    return [p.data.copy() for p in net.params]


def test_training_is_bit_identical_for_same_seed():
    a, b = _train(4), _train(4)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    c = _train(5)
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a, c))


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, total = clip_grad_norm(grads, 1.0)
    assert total == 5.0
    np.testing.assert_allclose(np.sqrt(sum((g * g).sum() for g in clipped)), 1.0)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same[0] is grads[0]


def test_polyak_update():
    a = Mlp([2, 2], params=[np.ones((2, 2)), np.ones(2)])
    b = Mlp([2, 2], params=[np.zeros((2, 2)), np.zeros(2)])
    polyak_update(a, b, 0.25)
    np.testing.assert_allclose(a.params[0].data, 0.75)
    polyak_update(a, b, 1.0)
    np.testing.assert_array_equal(a.params[0].data, 0.0)


# --- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = Mlp([5, 9, 3], rng_stream(8, "ckpt"))
    save_mlp(net, tmp_path / "net.npz")
    back = load_mlp(tmp_path / "net.npz")
    assert back.widths == net.widths
    for p, q in zip(net.params, back.params):
        assert p.data.tobytes() == q.data.tobytes()


def test_checkpoint_version_and_kind_checked(tmp_path):
    net = Mlp([2, 2], rng_stream(0, "v"))
    save_mlp(net, tmp_path / "ok.npz")
    state = read_npz(tmp_path / "ok.npz", "mlp")
    state["format_version"] = np.asarray(99)
    write_npz(tmp_path / "bad.npz", state)
    with pytest.raises(ValueError, match="version"):
        load_mlp(tmp_path / "bad.npz")
    with pytest.raises(ValueError, match="expected"):
        read_npz(tmp_path / "ok.npz", "dico_policy_set")


def test_named_streams_are_independent_and_reproducible():
    a = rng_stream(3, "init").normal(size=4)
    assert np.array_equal(a, rng_stream(3, "init").normal(size=4))
    assert not np.array_equal(a, rng_stream(3, "env").normal(size=4))
    assert not np.array_equal(a, rng_stream(4, "init").normal(size=4))
