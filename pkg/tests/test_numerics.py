import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from v2cnet import numerics as nx
from v2cnet.numerics import (
    Adam,
    AdamState,
    DimensionError,
    NumericError,
    Parameter,
    StateError,
    Tensor,
    adam_step,
    backward,
    finite_diff_check,
)

finite = st.floats(-20, 20, allow_nan=False)


def vec(*xs):
    return Tensor(np.array(xs, dtype=float))


# -- forward values ---------------------------------------------------------

def test_affine_examples():
    assert np.array_equal(nx.affine(vec(3, -1), Tensor(np.eye(2)), vec(0, 0)).value, [3, -1])
    assert np.array_equal(nx.affine(vec(9, 9), Tensor(np.zeros((2, 2))), vec(1, 2)).value, [1, 2])
    W = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(nx.affine(vec(1, 1), W, vec(0, 0)).value, [3, 7])


def test_affine_shape_error_names_operands():
    with pytest.raises(DimensionError, match="W"):
        nx.affine(vec(1, 2, 3), Tensor(np.eye(2)), vec(0, 0))


def test_affine_batched_matches_rows():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
    out = nx.affine(Tensor(X), Tensor(W), Tensor(b)).value
    for i in range(5):
        assert np.allclose(out[i], W @ X[i] + b, atol=1e-14)


def test_sigmoid_examples():
    assert nx.sigmoid(vec(0)).value[0] == 0.5
    assert abs(nx.sigmoid(vec(50)).value[0] - 1.0) < 1e-15
    assert nx.sigmoid(vec(1)).value[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    assert nx.sigmoid(vec(1)).value[0] == pytest.approx(0.731058578, abs=1e-9)


def test_tanh_examples():
    assert nx.tanh_act(vec(0)).value[0] == 0.0
    assert nx.tanh_act(vec(1)).value[0] == pytest.approx(0.761594156, abs=1e-9)


@given(finite)
def test_tanh_is_odd(x):
    v = nx.tanh_act(vec(x, -x)).value
    assert v[0] == -v[1]


def test_relu_examples():
    assert np.array_equal(nx.relu(vec(-1, 0, 2)).value, [0, 0, 2])
    assert np.array_equal(nx.relu(vec(-3, -0.5)).value, [0, 0])
    assert np.array_equal(nx.relu(vec(3.5)).value, [3.5])


def test_softmax_examples():
    assert np.allclose(nx.softmax(vec(0, 0, 0)).value, 1 / 3, atol=1e-15)
    assert abs(nx.softmax(vec(2.0, 2.0 + 1e3)).value[1] - 1.0) < 1e-12
    e1, e2 = math.exp(1), math.exp(2)
    assert np.allclose(nx.softmax(vec(1, 2)).value, [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-15)
    assert nx.softmax(vec(1, 2)).value[0] == pytest.approx(0.268941, abs=1e-6)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    s = nx.softmax(Tensor(x)).value
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.allclose(s, nx.softmax(Tensor(x + c)).value, atol=1e-12, rtol=0)


def test_temporal_conv_examples():
    X = vec(1, 2, 3).value.reshape(3, 1)
    out = nx.temporal_conv(Tensor(X), Tensor(np.ones((3, 1, 1))), vec(0)).value
    assert np.array_equal(out[:, 0], [3, 6, 5])

    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 4))
    K = np.eye(4)[None]
    assert np.array_equal(nx.temporal_conv(Tensor(X), Tensor(K), Tensor(np.zeros(4))).value, X)

    b = np.array([0.5, -1.0])
    out = nx.temporal_conv(Tensor(np.zeros((5, 3))), Tensor(rng.normal(size=(3, 3, 2))), Tensor(b)).value
    assert np.array_equal(out, np.tile(b, (5, 1)))


def test_temporal_conv_matches_direct_sum():
    rng = np.random.default_rng(2)
    T, d_in, d_out, w = 7, 3, 2, 5
    X, K, b = rng.normal(size=(T, d_in)), rng.normal(size=(w, d_in, d_out)), rng.normal(size=d_out)
    half = w // 2
    ref = np.zeros((T, d_out))
    for t in range(T):
        for j in range(w):
            s = t + j - half
            if 0 <= s < T:
                ref[t] += X[s] @ K[j]
    ref += b
    assert np.allclose(nx.temporal_conv(Tensor(X), Tensor(K), Tensor(b)).value, ref, atol=1e-13)


def test_temporal_conv_shape_errors():
    with pytest.raises(DimensionError):
        nx.temporal_conv(Tensor(np.zeros((4, 3))), Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        nx.temporal_conv(Tensor(np.zeros((4, 3))), Tensor(np.zeros((3, 3, 2))), Tensor(np.zeros(3)))


def test_temporal_maxpool_examples():
    X = np.array([1.0, 3, 2, 5]).reshape(4, 1)
    assert np.array_equal(nx.temporal_maxpool(Tensor(X), 2, 2).value[:, 0], [3, 5])
    rng = np.random.default_rng(3)
    Y = rng.normal(size=(5, 3))
    assert np.array_equal(nx.temporal_maxpool(Tensor(Y), 1, 1).value, Y)
    C = np.full((7, 2), 4.25)
    out = nx.temporal_maxpool(Tensor(C), 2, 2).value
    assert out.shape == (4, 2) and np.all(out == 4.25)


def test_temporal_maxpool_ceil_lengths():
    for T, expected in [(30, 15), (15, 8), (8, 4), (1, 1)]:
        assert nx.temporal_maxpool(Tensor(np.zeros((T, 1))), 2, 2).shape == (expected, 1)


def test_temporal_maxpool_empty_sequence():
    with pytest.raises(ValueError):
        nx.temporal_maxpool(Tensor(np.zeros((0, 3))), 2, 2)


def test_sigmoid_cross_entropy_examples():
    assert nx.sigmoid_cross_entropy(vec(0, 0), np.array([1.0, 0])).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    assert nx.sigmoid_cross_entropy(vec(40, -40, -40), np.array([1.0, 0, 0])).item() < 1e-8
    assert nx.sigmoid_cross_entropy(vec(0), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_sigmoid_cross_entropy_requires_one_hot():
    with pytest.raises(ValueError):
        nx.sigmoid_cross_entropy(vec(0, 0), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        nx.sigmoid_cross_entropy(vec(0, 0), np.array([0.5, 0.5]))


def test_sigmoid_cross_entropy_is_stable_for_huge_logits():
    v = nx.sigmoid_cross_entropy(vec(1e4, -1e4), np.array([0.0, 1.0])).item()
    assert np.isfinite(v) and v == pytest.approx(2e4)


def test_softmax_cross_entropy_examples():
    assert nx.softmax_cross_entropy(vec(0.3, 0.3, 0.3, 0.3), np.array(2)).item() == pytest.approx(math.log(4), abs=1e-15)
    assert nx.softmax_cross_entropy(vec(-40, 40, -40), np.array(1)).item() < 1e-8
    expected = -math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
    assert nx.softmax_cross_entropy(vec(1, 2), np.array(1)).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.313261, abs=1e-6)


def test_softmax_cross_entropy_index_out_of_range():
    with pytest.raises(ValueError):
        nx.softmax_cross_entropy(vec(1, 2), np.array(2))
    with pytest.raises(ValueError):
        nx.softmax_cross_entropy(vec(1, 2), np.array(-1))


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.data())
def test_softmax_cross_entropy_is_negative_log_softmax(x, data):
    i = data.draw(st.integers(0, x.size - 1))
    loss = nx.softmax_cross_entropy(Tensor(x), np.array(i)).item()
    assert abs(loss + nx.log_softmax(x)[i]) < 1e-10


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_forward_outputs_stay_finite(x):
    t = Tensor(x)
    for out in (nx.sigmoid(t), nx.tanh_act(t), nx.relu(t), nx.softmax(t)):
        assert np.all(np.isfinite(out.value))


def test_ops_are_deterministic():
    rng = np.random.default_rng(4)
    X, K, b = rng.normal(size=(9, 3)), rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    a = nx.temporal_conv(Tensor(X), Tensor(K), Tensor(b)).value
    c = nx.temporal_conv(Tensor(X), Tensor(K), Tensor(b)).value
    assert a.tobytes() == c.tobytes()


# -- backward ---------------------------------------------------------------

def test_backward_linear_map():
    x = np.array([0.5, -2.0, 3.0])
    W = Parameter(np.random.default_rng(5).normal(size=(2, 3)), "W")
    backward(nx.total(nx.affine(Tensor(x), W)))
    assert np.array_equal(W.grad, np.tile(x, (2, 1)))


def test_unused_parameter_keeps_zero_gradient():
    W = Parameter(np.ones((2, 2)), "W")
    unused = Parameter(np.ones(3), "u")
    backward(nx.total(nx.affine(vec(1, 2), W)))
    assert np.all(unused.grad == 0)


def test_constant_loss_gives_zero_gradients():
    W = Parameter(np.ones(2), "W")
    backward(Tensor(3.0, op="const"))
    assert np.all(W.grad == 0)


def test_backward_without_forward_pass():
    with pytest.raises(StateError):
        backward(Tensor(1.0))
    with pytest.raises(StateError):
        backward(Parameter(np.ones(1), "p"))


def test_backward_requires_scalar():
    W = Parameter(np.ones(2), "W")
    with pytest.raises(ValueError):
        backward(nx.mul(W, 2.0))


def test_gradients_accumulate_until_reset():
    W = Parameter(np.array([1.0, 2.0]), "W")
    backward(nx.total(nx.mul(W, 3.0)))
    backward(nx.total(nx.mul(W, 3.0)))
    assert np.array_equal(W.grad, [6.0, 6.0])
    W.zero_grad()
    assert np.all(W.grad == 0) and W.grad.shape == W.value.shape


def test_shared_subexpression_gradient():
    W = Parameter(np.array([1.5]), "W")
    y = nx.mul(W, W)
    backward(nx.total(nx.add(y, y)))
    assert W.grad[0] == pytest.approx(4 * 1.5)


def test_no_grad_records_nothing():
    W = Parameter(np.ones(2), "W")
    with nx.no_grad():
        out = nx.total(nx.mul(W, 2.0))
    assert not out.requires_grad
    assert nx.grad_enabled()


# -- finite differences -----------------------------------------------------

def test_finite_diff_quadratic():
    # entries bounded away from zero so no coordinate's gradient is below the rounding floor
    W = Parameter(np.random.default_rng(6).uniform(0.5, 1.5, size=(2, 3)), "W")
    loss = lambda: nx.mul(nx.total(nx.mul(W, W)), 0.5)  # noqa: E731
    backward(loss())
    assert np.allclose(W.grad, W.value, atol=1e-15)
    assert finite_diff_check(loss, [W]) < 1e-9


def test_finite_diff_zero_gradient():
    W = Parameter(np.zeros(3), "W")
    assert finite_diff_check(lambda: nx.total(nx.mul(W, W)), [W]) == 0.0


def test_finite_diff_nonfinite_loss():
    W = Parameter(np.array([1.0]), "W")
    with pytest.raises(NumericError):
        finite_diff_check(lambda: nx.mul(nx.total(W), np.inf), [W])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: nx.total(W), [W], epsilon=0.0)


def test_finite_diff_detects_wrong_backward():
    W = Parameter(np.array([0.7, -1.2]), "W")

    def bad():
        v = W.value
        return nx.total(nx._record(v ** 3, "cube", (W,), lambda g: (2 * v * g,)))

    assert finite_diff_check(bad, [W]) > 1e-2


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient():
    p = Parameter(np.array([1.0, -2.0]), "p")
    st_ = AdamState.like(p)
    adam_step(p, st_)
    assert np.array_equal(p.value, [1.0, -2.0])
    assert st_.step_count == 1

    st_.first_moment[:] = 0.4
    st_.second_moment[:] = 0.9
    adam_step(p, st_)
    assert np.allclose(st_.first_moment, 0.36) and np.allclose(st_.second_moment, 0.9 * 0.999)
    assert st_.step_count == 2


def test_adam_first_step_magnitude():
    lr = 1e-4
    p = Parameter(np.array([0.0, 0.0, 0.0]), "p")
    p.grad[:] = [3.0, -0.5, 1e-3]
    adam_step(p, AdamState.like(p), lr=lr)
    assert np.all(np.abs(p.value) >= 0.9 * lr) and np.all(np.abs(p.value) <= lr)
    assert np.array_equal(np.sign(p.value), [-1, 1, -1])


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(7)
    p = Parameter(rng.normal(size=4), "p")
    st_ = AdamState.like(p)
    v = p.value.copy()
    m = np.zeros(4)
    s = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad[:] = g
        adam_step(p, st_, lr=0.01)
        m = 0.9 * m + 0.1 * g
        s = 0.999 * s + 0.001 * g * g
        v = v - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(s / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.value, v, atol=1e-15)
    assert st_.step_count == 5


def test_adam_identical_parameters_get_identical_updates():
    a, b = Parameter(np.array([0.3, 0.1]), "a"), Parameter(np.array([0.3, 0.1]), "b")
    opt = Adam({"a": a, "b": b}, lr=1e-2)
    for _ in range(3):
        a.grad[:] = b.grad[:] = [0.2, -0.7]
        opt.step()
    assert a.value.tobytes() == b.value.tobytes()


def test_adam_state_shape_mismatch():
    p = Parameter(np.zeros(3), "p")
    with pytest.raises(ValueError):
        adam_step(p, AdamState(np.zeros(2), np.zeros(2), 0))
