import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflownets.nn import (
    GradientSet,
    MlpParams,
    NonFiniteError,
    ShapeError,
    adam_init,
    adam_update,
    load_params,
    max_relative_error,
    mlp_backward,
    mlp_forward_batch,
    mlp_init,
    mlp_zeros,
    numerical_gradient,
    save_params,
)


def single(w, b, activation="silu"):
    return MlpParams((1, 1), (np.array([[w]], dtype=float),), (np.array([b], dtype=float),), activation)


def test_init_two_inputs_one_output():
    p = mlp_init([2, 1], seed=7)
    assert p.weights[0].shape == (1, 2)
    np.testing.assert_array_equal(p.biases[0], [0.0])


def test_init_table_sized_network():
    p = mlp_init([3, 256, 256, 1], seed=0)
    assert [w.shape for w in p.weights] == [(256, 3), (256, 256), (1, 256)]


def test_init_is_deterministic():
    a, b = mlp_init([3, 5, 2], seed=11), mlp_init([3, 5, 2], seed=11)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("dims", [[3], [3, 0, 1], [-1, 2]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        mlp_init(dims, seed=0)


def test_zero_network_outputs_zero(rng):
    p = mlp_zeros([4, 8, 8, 3])
    np.testing.assert_array_equal(mlp_forward_batch(p, rng.standard_normal((5, 4))), 0.0)


def test_affine_identity():
    np.testing.assert_allclose(mlp_forward_batch(single(2.0, 3.0), np.array([[1.0]])), [[5.0]])


def test_batch_rows_are_independent(rng):
    p = mlp_init([3, 7, 2], rng)
    x = rng.standard_normal((2, 3))
    stacked = np.vstack([mlp_forward_batch(p, x[:1]), mlp_forward_batch(p, x[1:])])
    np.testing.assert_allclose(mlp_forward_batch(p, x), stacked, rtol=0, atol=1e-15)


def test_forward_rejects_wrong_width(rng):
    p = mlp_init([3, 4, 1], rng)
    with pytest.raises(ShapeError):
        mlp_forward_batch(p, np.ones((2, 4)))


def test_zero_upstream_gives_zero_gradients(rng):
    p = mlp_init([3, 6, 2], rng)
    g = mlp_backward(p, rng.standard_normal((4, 3)), np.zeros((4, 2)))
    for arr in g.arrays():
        np.testing.assert_array_equal(arr, 0.0)


def test_single_layer_chain_rule():
    g = mlp_backward(single(0.3, -1.0), np.array([[2.5]]), np.array([[4.0]]))
    assert g.weights[0][0, 0] == pytest.approx(4.0 * 2.5)
    assert g.biases[0][0] == pytest.approx(4.0)


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_gradient_matches_finite_differences(rng, activation):
    p = mlp_init([4, 8, 1], rng, activation=activation)
    x = rng.standard_normal((6, 4))
    up = rng.standard_normal((6, 1))
    err = max_relative_error(mlp_backward(p, x, up), numerical_gradient(p, x, up, h=1e-4))
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    dims=st.lists(st.integers(1, 6), min_size=2, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_gradient_property(dims, seed):
    rng = np.random.default_rng(seed)
    p = mlp_init(dims, rng)
    x = rng.standard_normal((3, dims[0]))
    up = rng.standard_normal((3, dims[-1]))
    assert max_relative_error(mlp_backward(p, x, up), numerical_gradient(p, x, up)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.5, 3.0))
def test_backward_is_linear_in_upstream(seed, scale):
    rng = np.random.default_rng(seed)
    p = mlp_init([3, 5, 2], rng)
    x = rng.standard_normal((4, 3))
    up = rng.standard_normal((4, 2))
    a = mlp_backward(p, x, up * scale)
    b = mlp_backward(p, x, up).scale(scale)
    for u, v in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-14)


def _hand_adam(g_seq, theta, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta, m, v


def _grads(gw, gb):
    return GradientSet((np.array([[gw]]),), (np.array([gb]),))


def test_adam_zero_gradient_keeps_params():
    p = single(0.7, 0.2)
    fresh, s1 = adam_update(p, _grads(0.0, 0.0), adam_init(p), 1e-3)
    np.testing.assert_array_equal(fresh.weights[0], p.weights[0])
    np.testing.assert_array_equal(fresh.biases[0], p.biases[0])
    assert s1.step_count == 1


def test_adam_zero_gradient_decays_moments():
    p = single(0.7, 0.2)
    _, state = adam_update(p, _grads(1.0, 1.0), adam_init(p), 1e-3)
    m0, v0 = state.first_moment.weights[0][0, 0], state.second_moment.weights[0][0, 0]
    _, s2 = adam_update(p, _grads(0.0, 0.0), state, 1e-3)
    assert s2.first_moment.weights[0][0, 0] == pytest.approx(0.9 * m0)
    assert s2.second_moment.weights[0][0, 0] == pytest.approx(0.999 * v0)
    assert s2.step_count == 2


def test_adam_first_step_matches_hand_oracle():
    p = single(0.5, 0.0)
    p1, s1 = adam_update(p, _grads(0.2, -3.0), adam_init(p), 0.01)
    w, _, _ = _hand_adam([0.2], 0.5, 0.01)
    b, _, _ = _hand_adam([-3.0], 0.0, 0.01)
    assert p1.weights[0][0, 0] == pytest.approx(w, abs=1e-15)
    assert p1.biases[0][0] == pytest.approx(b, abs=1e-15)
    # the first bias-corrected step is lr * g/(|g|+eps)
    assert p1.weights[0][0, 0] == pytest.approx(0.5 - 0.01 * 0.2 / (0.2 + 1e-8), abs=1e-15)
    assert s1.step_count == 1


def test_adam_two_steps_match_hand_oracle():
    p = single(0.5, 0.0)
    state = adam_init(p)
    for g in (0.2, -0.05):
        p, state = adam_update(p, _grads(g, 0.0), state, 0.01)
    w, m, v = _hand_adam([0.2, -0.05], 0.5, 0.01)
    assert p.weights[0][0, 0] == pytest.approx(w, abs=1e-15)
    assert state.first_moment.weights[0][0, 0] == pytest.approx(m, abs=1e-15)
    assert state.second_moment.weights[0][0, 0] == pytest.approx(v, abs=1e-15)


def test_adam_rejects_bad_inputs():
    p = single(0.5, 0.0)
    with pytest.raises(ValueError):
        adam_update(p, _grads(1.0, 1.0), adam_init(p), 0.0)
    with pytest.raises(NonFiniteError):
        adam_update(p, _grads(np.nan, 1.0), adam_init(p), 1e-3)


def test_checkpoint_round_trip(tmp_path, rng):
    p = mlp_init([3, 9, 4, 2], rng, activation="tanh")
    save_params(p, tmp_path / "net.ckpt")
    q = load_params(tmp_path / "net.ckpt")
    assert q.layer_dims == p.layer_dims and q.activation == "tanh"
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_garbage(tmp_path, rng):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_params(path)
    save_params(mlp_init([2, 1], rng), path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError):
        load_params(path)
