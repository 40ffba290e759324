import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import sigmoid_closed_form
from specdetect.core_types import (
    D_BINS, DimensionMismatch, ModClass, Modulation, NotNormalized, Pass, Spectrum,
)
from specdetect.lstm_core import (
    LstmState, Predictor, init_params, load_model, lstm_step, predict_arrays, predict_pass,
    primary_decode, save_model, secondary_classify, sigmoid, zero_params,
)


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(710.0) == 1.0
    assert sigmoid(-710.0) == pytest.approx(sigmoid_closed_form(-710.0), abs=0)
    with np.errstate(over="raise"):
        sigmoid(np.array([-700.0, 700.0, 710.0, -745.0]))


@given(st.floats(-700, 700))
def test_sigmoid_symmetry(a):
    assert abs(sigmoid(a) + sigmoid(-a) - 1.0) <= 1e-15
    assert sigmoid(a) == pytest.approx(sigmoid_closed_form(a), rel=1e-15, abs=1e-300)


def small_input(d, seed=0):
    return Spectrum(np.random.default_rng(seed).uniform(-1, 1, d), normalized=True) \
        if d == D_BINS else np.random.default_rng(seed).uniform(-1, 1, d)


def test_zero_params_step():
    p = zero_params(h=20)
    state, gates = lstm_step(p, small_input(D_BINS), LstmState.zeros(20))
    for g in (gates.f, gates.i, gates.o, gates.candidate):
        assert np.all(g == 0.5)
    assert np.allclose(state.c, 0.25, atol=0)
    expected = 0.5 * sigmoid_closed_form(0.25)
    assert np.allclose(state.z, expected, rtol=1e-15)
    assert expected == pytest.approx(0.28109, abs=1e-5)


def test_saturated_forget_gate_keeps_cell():
    p = zero_params(h=4, d=6).replace(b_f=np.full(4, 40.0))
    c0 = np.array([1.5, -2.0, 0.0, 3.25])
    state, _ = lstm_step(p, np.linspace(-1, 1, 6), LstmState(c0, np.zeros(4)))
    np.testing.assert_allclose(state.c, c0 + 0.25, atol=1e-15, rtol=0)


def test_step_is_pure():
    p = init_params(h=5, d=7, seed=1)
    x = np.random.default_rng(2).uniform(-1, 1, 7)
    s = LstmState(np.ones(5), np.full(5, 0.3))
    a, ga = lstm_step(p, x, s)
    b, gb = lstm_step(p, x, s)
    assert np.array_equal(a.c, b.c) and np.array_equal(a.z, b.z)
    assert np.array_equal(ga.f, gb.f)


def test_step_input_checks():
    p = zero_params(h=3)
    with pytest.raises(NotNormalized):
        lstm_step(p, Spectrum(np.zeros(D_BINS)), LstmState.zeros(3))
    with pytest.raises(DimensionMismatch):
        lstm_step(p, np.zeros(5), LstmState.zeros(3))
    with pytest.raises(DimensionMismatch):
        primary_decode(p, np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(arrays(float, 6, elements=st.floats(-1, 1)),
       arrays(float, 4, elements=st.floats(-50, 50)),
       st.integers(0, 1000), st.sampled_from(["sigmoid", "tanh"]))
def test_gate_range_and_state_bounds(x, c_old, seed, squash):
    p = init_params(h=4, d=6, seed=seed, init_scale=3.0, squash=squash)
    z_old = np.random.default_rng(seed).uniform(0, 1, 4)
    state, g = lstm_step(p, x, LstmState(c_old, z_old))
    for arr in (g.f, g.i, g.o):
        assert np.all((arr >= 0) & (arr <= 1))
    assert np.all(np.abs(state.z) < 1)
    assert np.all(np.abs(state.c) <= np.abs(c_old).max() + 1 + 1e-12)


def test_affine_head_degenerate_cases_small():
    p = init_params(h=3, d=8, seed=0)
    v = np.arange(8.0)
    q = p.replace(primary_W=np.zeros((8, 3)), primary_b=v)
    assert np.array_equal(q.primary_W @ np.array([0.2, 0.9, 0.4]) + q.primary_b, v)
    r = p.replace(primary_b=np.zeros(8))
    e1 = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(r.primary_W @ e1 + r.primary_b, r.primary_W[:, 1])


def test_primary_decode_full_size():
    p = init_params(h=3, seed=0)
    v = np.linspace(-1, 1, D_BINS)
    q = p.replace(primary_W=np.zeros((D_BINS, 3)), primary_b=v)
    out = primary_decode(q, np.array([0.1, 0.5, 0.9]))
    assert out.normalized and np.array_equal(out.bins, v)
    r = p.replace(primary_b=np.zeros(D_BINS))
    assert np.array_equal(primary_decode(r, np.array([0.0, 0.0, 1.0])).bins, r.primary_W[:, 2])


def test_secondary_classify():
    p = zero_params(h=5)
    np.testing.assert_allclose(secondary_classify(p, np.full(5, 0.3)), 0.25, rtol=0, atol=1e-15)
    q = init_params(h=5, seed=3)
    z = np.random.default_rng(0).uniform(0, 1, 5)
    probs = secondary_classify(q, z)
    assert abs(probs.sum() - 1) <= 1e-12 and np.all((probs > 0) & (probs < 1))
    shifted = q.replace(secondary_b=q.secondary_b + 123.0)
    np.testing.assert_allclose(secondary_classify(shifted, z), probs, atol=1e-12, rtol=0)


def tiny_pass(T, seed=0):
    rng = np.random.default_rng(seed)
    fs = np.zeros(T, dtype=int)
    return Pass("T", Modulation.PSK8, rng.uniform(-100, -20, (T, D_BINS)), fs,
                [ModClass.PSK8_NOISE] * T)


def test_predict_pass_shapes_and_determinism():
    p = init_params(h=6, seed=4)
    assert len(predict_pass(p, tiny_pass(2))) == 1
    out1 = predict_pass(p, tiny_pass(30))
    out2 = predict_pass(p, tiny_pass(30))
    assert len(out1) == 29
    for (y1, g1), (y2, g2) in zip(out1, out2):
        assert np.array_equal(y1.bins, y2.bins) and g1 == g2 and y1.normalized


def test_streaming_predictor_matches_batch():
    p = init_params(h=6, seed=4)
    x = tiny_pass(25).normalized()
    y_hat, probs = predict_arrays(p, x)
    pred = Predictor(p)
    for t in range(24):
        y, pr = pred.step(x[t])
        np.testing.assert_allclose(y, y_hat[t], rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(pr, probs[t], rtol=1e-12, atol=1e-13)


def test_predict_matches_stepwise_cell():
    p = init_params(h=4, seed=9, squash="tanh")
    x = tiny_pass(10).normalized()
    y_hat, _ = predict_arrays(p, x)
    s = LstmState.zeros(4)
    for t in range(9):
        s, _ = lstm_step(p, Spectrum(x[t], normalized=True), s)
        np.testing.assert_allclose(primary_decode(p, s.z).bins, y_hat[t], rtol=1e-12, atol=1e-13)


def test_model_file_round_trip(tmp_path):
    p = init_params(h=20, seed=11)
    path = save_model(p, tmp_path / "m.json")
    q, norm = load_model(path)
    assert (q.h, q.d, q.R, q.squash) == (20, 1024, 4, "sigmoid")
    assert (norm.a, norm.b) == (-60.0, 60.0)
    for name, arr in p.tensors().items():
        assert np.array_equal(arr, getattr(q, name)), name
