import math
import warnings

import numpy as np
import pytest

from specdetect.core_types import (
    D_BINS, ModClass, Modulation, NormalizationParams, Pass, ValidationError,
)
from specdetect.lstm_core import init_params, zero_params
from specdetect.training import (
    CLASSIFIER_TENSORS, EmptySet, InvalidProbability, PREDICTOR_TENSORS, TrainConfig,
    check_gradients, grad_predictor, loss_abs, loss_class, loss_mse, make_batch,
    batch_from_passes, predictor_loss_and_grad, train_classifier, train_predictor,
)


def test_loss_abs_examples():
    y = np.random.default_rng(0).uniform(-1, 1, (3, 16))
    assert loss_abs(y, y) == 0.0
    assert loss_abs(y[:1] + 0.1, y[:1]) == pytest.approx(0.1, abs=1e-15)
    two = np.vstack([y[0] + 0.1, y[1] - 0.3])
    assert loss_abs(two, y[:2]) == pytest.approx(0.2, abs=1e-15)


def test_loss_mse_examples():
    y = np.random.default_rng(1).uniform(-1, 1, (2, 16))
    assert loss_mse(y, y) == 0.0
    assert loss_mse(y[:1] + 0.1, y[:1]) == pytest.approx(0.01, abs=1e-15)
    assert loss_mse(np.vstack([y[0] + 0.1, y[1] + 0.3]), y) == pytest.approx(0.05, abs=1e-15)


def test_loss_errors():
    with pytest.raises(EmptySet):
        loss_abs(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ValidationError):
        loss_mse(np.zeros((1, 4)), np.zeros((1, 5)))


def test_loss_class_examples():
    assert loss_class([[0, 0, 1, 0]], [2]) == 0.0
    assert loss_class([[0.25] * 4], [1]) == pytest.approx(math.log(4), abs=1e-12)
    probs = [[0.5, 0.5, 0, 0], [0.25, 0.25, 0.25, 0.25]]
    assert loss_class(probs, [0, 3]) == pytest.approx(2.079442, abs=1e-6)


def test_loss_class_clamps_zero_probability():
    with pytest.warns(InvalidProbability):
        value = loss_class([[1.0, 0.0, 0.0, 0.0]], [1])
    assert value == pytest.approx(-math.log(1e-300))
    with pytest.raises(ValidationError):
        loss_class([[0.5, 0.6, 0, 0]], [0])


def test_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        TrainConfig(predictor_epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValidationError):
        TrainConfig(truncation_span=0)
    with pytest.raises(ValidationError):
        TrainConfig(loss_scale=0)


@pytest.mark.parametrize("loss", ["mse", "abs"])
@pytest.mark.parametrize("span", [1, 2, 5])
@pytest.mark.parametrize("squash", ["sigmoid", "tanh"])
def test_gradients_match_finite_differences(loss, span, squash):
    report = check_gradients(h=3, d=5, seed=3, loss=loss, truncation_span=span, squash=squash)
    if loss == "abs":
        assert report.min_abs_residual > 1e-3
    assert report.max_rel_error < 1e-6
    assert report.n_coords == 4 * (3 * 5 + 3 * 3 + 3) + 5 * 3 + 5


def test_gradient_check_zero_smoke():
    params = zero_params(h=2, d=4)
    seqs = [np.zeros((3, 4))]
    report = check_gradients(h=2, d=4, params=params, sequences=seqs, loss="mse")
    assert np.isfinite(report.max_rel_error)


def test_zero_gradient_step_is_stationary():
    params = init_params(h=3, d=5, seed=0)
    seqs = [np.random.default_rng(0).uniform(-1, 1, (6, 5))]
    before, grads = grad_predictor(params, seqs, "mse")
    moved = params.replace(**{k: getattr(params, k) - 0.02 * np.zeros_like(g)
                              for k, g in grads.items()})
    after, _ = grad_predictor(moved, seqs, "mse")
    assert abs(after - before) <= 1e-12


def test_abs_subgradient_zero_at_exact_fit():
    # Primary head zeroed and targets equal to the bias: every residual is exactly 0.
    params = init_params(h=3, d=5, seed=0).replace(primary_W=np.zeros((5, 3)),
                                                  primary_b=np.full(5, 0.25))
    seqs = [np.full((4, 5), 0.25)]
    value, grads = grad_predictor(params, seqs, "abs")
    assert value == 0.0
    for g in grads.values():
        assert not np.any(g)


def test_truncation_span_one_ignores_previous_state():
    params = init_params(h=3, d=5, seed=2)
    seqs = [np.random.default_rng(1).uniform(-1, 1, (5, 5))]
    _, g1 = grad_predictor(params, seqs, "mse", truncation_span=1)
    _, g_full = grad_predictor(params, seqs, "mse", truncation_span=10)
    assert not np.allclose(g1["U_f"], g_full["U_f"])
    # A single-step sequence has nothing to truncate.
    one = [seqs[0][:2]]
    _, a = grad_predictor(params, one, "mse", truncation_span=1)
    _, b = grad_predictor(params, one, "mse", truncation_span=4)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-14, atol=1e-16)


def toy_passes(n=2, T=40, seed=0):
    """Tiny passes with two alternating levels, enough to exercise the loops."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        fs = np.zeros(T, dtype=int)
        fs[10:30] = 2
        mod = Modulation.PSK8 if k % 2 == 0 else Modulation.QAM16
        labels = np.array([mod.label(v) for v in fs])
        level = np.where(fs[:, None] == 2, -20.0, -55.0) - 5.0 * (k % 2)
        out.append(Pass(f"P{k}", mod, level + rng.normal(0, 1, (T, D_BINS)), fs, labels))
    return out


def test_train_predictor_deterministic_and_descending():
    cfg = TrainConfig(predictor_epochs=15, classifier_epochs=5, h=4, seed=7)
    passes = toy_passes()
    p1, r1 = train_predictor(passes, cfg)
    p2, r2 = train_predictor(passes, cfg)
    assert len(r1.losses) == 15
    assert r1.final < r1.initial
    for name in PREDICTOR_TENSORS:
        assert np.array_equal(getattr(p1, name), getattr(p2, name))


def test_one_epoch_is_one_scaled_gradient_step():
    cfg = TrainConfig(predictor_epochs=1, h=3, seed=2, loss_scale=10.0)
    passes = toy_passes()[:2]
    p0 = init_params(3, D_BINS, 4, seed=2, init_scale=cfg.init_scale)
    p1, report = train_predictor(passes, cfg)
    value, grads = predictor_loss_and_grad(p0, batch_from_passes(passes, NormalizationParams()))
    assert report.losses == [value]
    for name in PREDICTOR_TENSORS:
        np.testing.assert_array_equal(getattr(p1, name),
                                      getattr(p0, name) - 0.02 * 10.0 * grads[name])


def test_train_classifier_freezes_lstm():
    cfg = TrainConfig(predictor_epochs=5, classifier_epochs=50, h=4, seed=1)
    passes = toy_passes()
    p, _ = train_predictor(passes, cfg)
    q, report = train_classifier(passes, p, cfg)
    q2, _ = train_classifier(passes, p, cfg)
    for name in PREDICTOR_TENSORS:
        assert np.array_equal(getattr(p, name), getattr(q, name))
    for name in CLASSIFIER_TENSORS:
        assert np.array_equal(getattr(q, name), getattr(q2, name))
    assert not np.array_equal(q.secondary_W, p.secondary_W)
    assert report.final < report.initial


def test_empty_training_split():
    with pytest.raises(EmptySet):
        train_predictor([], TrainConfig(predictor_epochs=1))


def test_batch_padding_matches_separate_sequences():
    params = init_params(h=3, d=5, seed=5)
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-1, 1, (7, 5)), rng.uniform(-1, 1, (4, 5))
    v_ab, g_ab = predictor_loss_and_grad(params, make_batch([a, b]), "mse")
    v_a, g_a = predictor_loss_and_grad(params, make_batch([a]), "mse")
    v_b, g_b = predictor_loss_and_grad(params, make_batch([b]), "mse")
    assert v_ab == pytest.approx((6 * v_a + 3 * v_b) / 9, rel=1e-12)
    for k in g_ab:
        np.testing.assert_allclose(g_ab[k], (6 * g_a[k] + 3 * g_b[k]) / 9, rtol=1e-10, atol=1e-15)
