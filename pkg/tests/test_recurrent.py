import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2cnet.numerics import DimensionError, Tensor
from v2cnet.recurrent import (
    INIT_RANGE,
    RnnState,
    gru_cell,
    init_rnn,
    lstm_cell,
    uniform_state,
    unroll,
    unroll_steps,
    zero_state,
)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def zeroed(cell, d=3, h=2):
    p = init_rnn(d, h, 0, cell)
    for prm in p.named().values():
        prm.value[...] = 0.0
    return p


def scalar_lstm():
    p = init_rnn(1, 1, 0, "lstm")
    vals = dict(W_xi=0.5, W_hi=-0.3, b_i=0.1, W_xf=0.2, W_hf=0.4, b_f=-0.2,
                W_xo=-0.6, W_ho=0.7, b_o=0.05, W_xg=0.9, W_hg=-0.8, b_g=0.3)
    for k, v in vals.items():
        p.named()[k].value[...] = v
    return p, vals


def lstm_hand(x, h, c, v):
    i = sig(v["W_xi"] * x + v["W_hi"] * h + v["b_i"])
    f = sig(v["W_xf"] * x + v["W_hf"] * h + v["b_f"])
    o = sig(v["W_xo"] * x + v["W_ho"] * h + v["b_o"])
    g = math.tanh(v["W_xg"] * x + v["W_hg"] * h + v["b_g"])
    c = f * c + i * g
    return o * math.tanh(c), c


def test_init_range_and_shapes():
    p = init_rnn(5, 3, 11, "lstm")
    for name, prm in p.named().items():
        assert np.all(np.abs(prm.value) <= INIT_RANGE)
        if name.startswith("W_x"):
            assert prm.shape == (3, 5)
        elif name.startswith("W_h"):
            assert prm.shape == (3, 3)
        else:
            assert prm.shape == (3,)
    assert len(init_rnn(5, 3, 11, "gru").named()) == 9


def test_init_is_seeded():
    a, b, c = init_rnn(4, 2, 7), init_rnn(4, 2, 7), init_rnn(4, 2, 8)
    assert all(np.array_equal(a.named()[k].value, b.named()[k].value) for k in a.named())
    assert any(not np.array_equal(a.named()[k].value, c.named()[k].value) for k in a.named())


def test_init_rejects_empty_sizes():
    with pytest.raises(ValueError):
        init_rnn(0, 2, 0)


def test_lstm_zero_parameters_fixed_point():
    p = zeroed("lstm")
    out = lstm_cell(Tensor(np.ones(3)), zero_state(p), p)
    assert np.all(out.h.value == 0) and np.all(out.c.value == 0)


def test_lstm_forget_gate_saturation_keeps_memory():
    p = zeroed("lstm")
    p.b_f.value[...] = 40.0
    v = np.array([0.7, -0.4])
    out = lstm_cell(Tensor(np.ones(3)), RnnState(Tensor(np.zeros(2)), Tensor(v)), p)
    assert np.allclose(out.c.value, v, atol=1e-15)


def test_lstm_scalar_oracle():
    p, v = scalar_lstm()
    out = lstm_cell(Tensor([0.8]), RnnState(Tensor([0.25]), Tensor([-0.5])), p)
    h, c = lstm_hand(0.8, 0.25, -0.5, v)
    assert out.h.value[0] == pytest.approx(h, abs=1e-15)
    assert out.c.value[0] == pytest.approx(c, abs=1e-15)


def test_lstm_three_step_unroll_oracle():
    p, v = scalar_lstm()
    xs = [0.3, -1.2, 0.7]
    H = unroll(Tensor(np.array(xs).reshape(3, 1)), p).value
    h = c = 0.0
    for t, x in enumerate(xs):
        h, c = lstm_hand(x, h, c, v)
        assert H[t, 0] == pytest.approx(h, abs=1e-15)


def test_gru_zero_parameters():
    p = zeroed("gru")
    out = gru_cell(Tensor(np.ones(3)), zero_state(p), p)
    assert np.all(out.h.value == 0) and out.c is None


def test_gru_update_gate_saturation_copies_state():
    p = zeroed("gru")
    p.b_z.value[...] = 40.0
    h0 = np.array([0.3, -0.9])
    out = gru_cell(Tensor(np.ones(3)), RnnState(Tensor(h0)), p)
    assert np.allclose(out.h.value, h0, atol=1e-15)


def test_gru_scalar_oracle():
    p = init_rnn(1, 1, 0, "gru")
    v = dict(W_xr=0.4, W_hr=-0.2, b_r=0.1, W_xz=-0.5, W_hz=0.3, b_z=0.2, W_xh=0.8, W_hh=0.6, b_h=-0.1)
    for k, val in v.items():
        p.named()[k].value[...] = val
    x, h = -0.6, 0.45
    r = sig(v["W_xr"] * x + v["W_hr"] * h + v["b_r"])
    z = sig(v["W_xz"] * x + v["W_hz"] * h + v["b_z"])
    ht = math.tanh(v["W_xh"] * x + v["W_hh"] * (r * h) + v["b_h"])
    out = gru_cell(Tensor([x]), RnnState(Tensor([h])), p)
    assert out.h.value[0] == pytest.approx(z * h + (1 - z) * ht, abs=1e-15)


def test_cell_shape_errors():
    p = init_rnn(3, 2, 0, "lstm")
    with pytest.raises(DimensionError):
        lstm_cell(Tensor(np.ones(4)), zero_state(p), p)
    with pytest.raises(DimensionError):
        lstm_cell(Tensor(np.ones(3)), RnnState(Tensor(np.zeros(5)), Tensor(np.zeros(5))), p)
    g = init_rnn(3, 2, 0, "gru")
    with pytest.raises(DimensionError):
        gru_cell(Tensor(np.ones(2)), zero_state(g), g)


def test_unroll_single_step_is_one_cell_application():
    p = init_rnn(3, 4, 1, "lstm")
    x = np.random.default_rng(0).normal(size=(1, 3))
    H = unroll(Tensor(x), p).value
    assert np.array_equal(H[0], lstm_cell(Tensor(x[0]), zero_state(p), p).h.value)


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_unroll_zero_parameters(cell):
    p = zeroed(cell)
    X = np.random.default_rng(1).normal(size=(5, 3))
    assert np.all(unroll(Tensor(X), p).value == 0)


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_unroll_batched_matches_single(cell):
    p = init_rnn(3, 4, 2, cell)
    X = np.random.default_rng(2).normal(size=(3, 6, 3))
    batched = unroll(Tensor(X), p).value
    for b in range(3):
        assert np.allclose(batched[b], unroll(Tensor(X[b]), p).value, atol=1e-15)


def test_unroll_returns_steps_and_rejects_empty():
    p = init_rnn(2, 3, 0, "gru")
    assert len(unroll_steps(Tensor(np.zeros((4, 2))), p)) == 4
    with pytest.raises(DimensionError):
        unroll(Tensor(np.zeros((0, 2))), p)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["lstm", "gru"]), st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_hidden_states_bounded(cell, seed, scale):
    rng = np.random.default_rng(seed)
    p = init_rnn(3, 4, rng, cell)
    for prm in p.named().values():
        prm.value *= scale
    H = unroll(Tensor(rng.normal(scale=scale, size=(6, 3))), p).value
    assert np.all(np.abs(H) <= 1.0)


def test_unroll_is_deterministic():
    p = init_rnn(3, 5, 3)
    X = Tensor(np.random.default_rng(3).normal(size=(7, 3)))
    init = uniform_state(p, np.random.default_rng(4))
    assert unroll(X, p, init).value.tobytes() == unroll(X, p, init).value.tobytes()


def test_uniform_state_range():
    p = init_rnn(2, 6, 0, "lstm")
    s = uniform_state(p, np.random.default_rng(0), (3,))
    assert s.h.shape == (3, 6) and s.c.shape == (3, 6)
    assert np.all(np.abs(s.h.value) <= INIT_RANGE)
    assert uniform_state(init_rnn(2, 6, 0, "gru"), np.random.default_rng(0)).c is None


def test_four_step_scalar_gradients():
    from v2cnet.gradcheck import cell_checks

    for r in cell_checks():
        assert r.error < 1e-6, r
