"""Losses, analytic gradients and full-batch gradient descent for the predictor and classifier.

Backpropagation is truncated after ``truncation_span`` steps: with the
default span of 1 the previous (c, z) are treated as constants, although the
forward state still runs through the whole pass.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core_types import (
    NUM_CLASSES, DimensionMismatch, ModClass, NormalizationParams, NumericalError,
    Pass, Spectrum, ValidationError,
)
from .lstm_core import (
    GATES, LstmParams, init_params, sigmoid, softmax, squash_grad, _squash,
)

log = logging.getLogger(__name__)

PREDICTOR_TENSORS = tuple(f"{fam}_{g}" for fam in "WUb" for g in ("c", "f", "i", "o")) + (
    "primary_W", "primary_b")
CLASSIFIER_TENSORS = ("secondary_W", "secondary_b")
PROB_FLOOR = 1e-300


class EmptySet(ValidationError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}")
        self.epoch = epoch


class InvalidProbability(UserWarning):
    """A true-class probability was clamped before taking its log."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    predictor_epochs: int = 6000
    classifier_epochs: int = 3000
    loss: str = "abs"
    truncation_span: int = 1
    seed: int = 0
    init_scale: float = 0.1
    h: int = 20
    squash: str = "sigmoid"
    # The per-bin mean loss is multiplied by this before differentiating; see train_predictor.
    loss_scale: float = 256.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not self.loss_scale > 0:
            raise ValidationError("loss_scale must be positive")
        if self.predictor_epochs < 1 or self.classifier_epochs < 1:
            raise ValidationError("epoch counts must be at least 1")
        if self.truncation_span < 1:
            raise ValidationError("truncation_span must be at least 1")
        if self.loss not in ("abs", "mse"):
            raise ValidationError(f"loss must be 'abs' or 'mse', got {self.loss!r}")


@dataclass
class LossReport:
    losses: list[float] = field(default_factory=list)
    duration_s: float = 0.0
    num_samples: int = 0

    @property
    def final(self) -> float:
        return self.losses[-1]

    @property
    def initial(self) -> float:
        return self.losses[0]


# -- losses ------------------------------------------------------------------

def _stack(spectra) -> np.ndarray:
    if isinstance(spectra, np.ndarray):
        arr = spectra.astype(float, copy=False)
    else:
        arr = np.array([s.bins if isinstance(s, Spectrum) else s for s in spectra], dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _pair(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    yh, y = _stack(predictions), _stack(targets)
    if yh.shape != y.shape:
        raise DimensionMismatch(f"predictions {yh.shape} vs targets {y.shape}")
    if y.shape[0] == 0:
        raise EmptySet("no spectra to average over")
    return yh, y


def loss_abs(predictions, targets) -> float:
    """Mean absolute error per bin, averaged over spectra and bins."""
    yh, y = _pair(predictions, targets)
    return float(np.mean(np.abs(yh - y)))


def loss_mse(predictions, targets) -> float:
    yh, y = _pair(predictions, targets)
    return float(np.mean((yh - y) ** 2))


def loss_class(probabilities, true_labels) -> float:
    """Cross-entropy summed over samples."""
    P = np.atleast_2d(np.asarray(probabilities, dtype=float))
    labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if len(P) != len(labels):
        raise DimensionMismatch(f"{len(P)} probability rows vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptySet("no samples")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("probability rows must sum to 1")
    if np.any((labels < 0) | (labels >= P.shape[1])):
        raise ValidationError("label out of range")
    p_true = P[np.arange(len(labels)), labels]
    if np.any(p_true <= PROB_FLOOR):
        warnings.warn(f"{int(np.sum(p_true <= PROB_FLOOR))} true-class probabilities clamped "
                      f"at {PROB_FLOOR}", InvalidProbability, stacklevel=2)
    return float(-np.sum(np.log(np.maximum(p_true, PROB_FLOOR))))


# -- batched forward with caches ------------------------------------------------

@dataclass
class _Batch:
    """Passes padded to a common length: inputs x_t and targets y_{t+1}."""

    X: np.ndarray  # (B, T1, d) inputs
    Y: np.ndarray  # (B, T1, d) targets
    mask: np.ndarray  # (B, T1) valid steps
    labels: np.ndarray  # (B, T1) class of the target step, -1 on padding

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def make_batch(sequences, labels=None) -> _Batch:
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    if not seqs:
        raise EmptySet("no sequences")
    d = seqs[0].shape[1]
    T1 = max(len(s) for s in seqs) - 1
    B = len(seqs)
    X = np.zeros((B, T1, d))
    Y = np.zeros((B, T1, d))
    mask = np.zeros((B, T1), dtype=bool)
    lab = np.full((B, T1), -1, dtype=np.int64)
    for k, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != d or len(s) < 2:
            raise DimensionMismatch(f"sequence {k} has shape {s.shape}")
        n = len(s) - 1
        X[k, :n] = s[:-1]
        Y[k, :n] = s[1:]
        mask[k, :n] = True
        if labels is not None:
            lab[k, :n] = np.asarray(labels[k])[1:]
    return _Batch(X, Y, mask, lab)


def batch_from_passes(passes: list[Pass], norm: NormalizationParams) -> _Batch:
    return make_batch([p.normalized(norm) for p in passes], [p.labels for p in passes])


@dataclass
class _Cache:
    gates: np.ndarray  # (B, T1, 3h) sigmoid f, i, o
    cand: np.ndarray  # (B, T1, h)
    c_prev: np.ndarray
    z_prev: np.ndarray
    c: np.ndarray
    sq_c: np.ndarray  # squash(c)
    z: np.ndarray


def forward(p: LstmParams, batch: _Batch) -> _Cache:
    B, T1, _ = batch.X.shape
    h = p.h
    W, U, b = p.stacked()
    squash = _squash(p.squash)
    drive = batch.X @ W.T + b
    gates = np.empty((B, T1, 3 * h))
    cand = np.empty((B, T1, h))
    cs = np.empty((B, T1, h))
    sq = np.empty((B, T1, h))
    zs = np.empty((B, T1, h))
    c = np.zeros((B, h))
    z = np.zeros((B, h))
    UT = U.T
    for t in range(T1):
        a = drive[:, t] + z @ UT
        g = sigmoid(a[:, :3 * h])
        cd = squash(a[:, 3 * h:])
        c = g[:, :h] * c + g[:, h:2 * h] * cd
        s = squash(c)
        z = g[:, 2 * h:] * s
        gates[:, t], cand[:, t], cs[:, t], sq[:, t], zs[:, t] = g, cd, c, s, z
    c_prev = np.zeros_like(cs)
    z_prev = np.zeros_like(zs)
    c_prev[:, 1:] = cs[:, :-1]
    z_prev[:, 1:] = zs[:, :-1]
    return _Cache(gates, cand, c_prev, z_prev, cs, sq, zs)


def _residual_grad(yh: np.ndarray, y: np.ndarray, mask: np.ndarray, loss: str):
    """Loss value and d(loss)/d(y_hat), both per-bin means over valid steps."""
    r = (yh - y) * mask[..., None]
    n = mask.sum() * y.shape[-1]
    if loss == "abs":
        return float(np.abs(r).sum() / n), np.sign(r) / n
    return float((r * r).sum() / n), 2.0 * r / n


def _backward(p: LstmParams, batch: _Batch, cache: _Cache, dZ: np.ndarray, span: int) -> dict:
    h = p.h
    _, U, _ = p.stacked()
    f, i, o = cache.gates[..., :h], cache.gates[..., h:2 * h], cache.gates[..., 2 * h:]
    dsq = squash_grad(p.squash, cache.sq_c)
    dcand_pre = squash_grad(p.squash, cache.cand)
    dgate_pre = cache.gates * (1.0 - cache.gates)
    dz, dc = dZ, np.zeros_like(dZ)
    dA = np.zeros(cache.gates.shape[:-1] + (4 * h,))
    for age in range(span):
        dc_tot = dc + dz * o * dsq
        da = np.concatenate([
            dc_tot * cache.c_prev * dgate_pre[..., :h],
            dc_tot * cache.cand * dgate_pre[..., h:2 * h],
            dz * cache.sq_c * dgate_pre[..., 2 * h:],
            dc_tot * i * dcand_pre,
        ], axis=-1)
        dA += da
        if age + 1 == span:
            break
        # Hand the signal to step t-1; the first step of a pass starts from constant zeros.
        back_z = da @ U
        back_c = dc_tot * f
        dz = np.zeros_like(dz)
        dc = np.zeros_like(dc)
        dz[:, :-1] = back_z[:, 1:]
        dc[:, :-1] = back_c[:, 1:]
        dz *= batch.mask[..., None]
        dc *= batch.mask[..., None]
        if not dz.any() and not dc.any():
            break
    flat = dA.reshape(-1, 4 * h)
    dW = flat.T @ batch.X.reshape(-1, batch.X.shape[-1])
    dU = flat.T @ cache.z_prev.reshape(-1, h)
    db = flat.sum(axis=0)
    grads = {}
    for k, g in enumerate(GATES):
        sl = slice(k * h, (k + 1) * h)
        grads[f"W_{g}"] = dW[sl]
        grads[f"U_{g}"] = dU[sl]
        grads[f"b_{g}"] = db[sl]
    return grads


def predictor_loss_and_grad(p: LstmParams, batch: _Batch, loss: str = "abs",
                            truncation_span: int = 1) -> tuple[float, dict]:
    cache = forward(p, batch)
    yh = cache.z @ p.primary_W.T + p.primary_b
    value, G = _residual_grad(yh, batch.Y, batch.mask, loss)
    Gf = G.reshape(-1, G.shape[-1])
    grads = _backward(p, batch, cache, G @ p.primary_W, truncation_span)
    grads["primary_W"] = Gf.T @ cache.z.reshape(-1, p.h)
    grads["primary_b"] = Gf.sum(axis=0)
    return value, grads


def grad_predictor(p: LstmParams, sequences, loss: str = "abs",
                   truncation_span: int = 1) -> tuple[float, dict]:
    """Loss and its gradient w.r.t. the LSTM and primary-head tensors.

    ``sequences`` are normalized (T x d) arrays, one per pass; each
    contributes the pairs (x_t, y_{t+1}) with the forward state reset at its start.
    """
    return predictor_loss_and_grad(p, make_batch(sequences), loss, truncation_span)


def _gd_update(p: LstmParams, grads: dict, lr: float, scale: float) -> LstmParams:
    return p.replace(**{name: getattr(p, name) - lr * scale * g for name, g in grads.items()})


def train_predictor(train: list[Pass], cfg: TrainConfig,
                    norm: NormalizationParams = NormalizationParams(),
                    params: LstmParams | None = None) -> tuple[LstmParams, LossReport]:
    """Full-batch gradient descent on the one-step prediction loss.

    The reported loss is the per-bin mean; the step is taken on
    ``cfg.loss_scale`` times that loss. Unscaled, a learning rate of 0.02
    barely moves a 1024-bin model in the epoch budget. Scaling by the full d
    makes the sign gradient of the ABS loss overshoot the decoder optimum
    every epoch, so the loss stalls well above the jitter floor. A scale of
    d / 4 = 256 is stable and converges.
    """
    if not train:
        raise EmptySet("empty training split")
    batch = batch_from_passes(train, norm)
    if params is None:
        params = init_params(cfg.h, batch.X.shape[-1], NUM_CLASSES, seed=cfg.seed,
                             init_scale=cfg.init_scale, squash=cfg.squash)
    scale = float(cfg.loss_scale)
    report = LossReport(num_samples=batch.count)
    start = time.perf_counter()
    for epoch in range(cfg.predictor_epochs):
        value, grads = predictor_loss_and_grad(params, batch, cfg.loss, cfg.truncation_span)
        if not np.isfinite(value):
            raise NonFiniteLoss(epoch, value)
        report.losses.append(value)
        params = _gd_update(params, grads, cfg.learning_rate, scale)
        if epoch % 100 == 0:
            log.debug("predictor epoch %d loss %.6g", epoch, value)
    report.duration_s = time.perf_counter() - start
    return params, report


def lstm_outputs(p: LstmParams, batch: _Batch) -> np.ndarray:
    """LSTM outputs z_t at every valid step, flattened in pass order."""
    return forward(p, batch).z[batch.mask]


def classifier_loss_and_grad(W: np.ndarray, b: np.ndarray, Z: np.ndarray,
                             labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    P = softmax(Z @ W.T + b)
    value = loss_class(P, labels)
    G = P.copy()
    G[np.arange(len(labels)), labels] -= 1.0
    return value, G.T @ Z, G.sum(axis=0)


def train_classifier(train: list[Pass], p: LstmParams, cfg: TrainConfig,
                     norm: NormalizationParams = NormalizationParams()
                     ) -> tuple[LstmParams, LossReport]:
    """Fit the secondary head on frozen LSTM outputs z_t against the labels of step t+1."""
    if not train:
        raise EmptySet("empty training split")
    batch = batch_from_passes(train, norm)
    Z = lstm_outputs(p, batch)
    labels = batch.labels[batch.mask]
    # Gradient of the summed loss is divided by the sample count: plain GD at
    # lr 0.02 on a sum over ~10^4 samples would just bounce between saturated heads.
    scale = 1.0 / len(labels)
    W, b = np.array(p.secondary_W), np.array(p.secondary_b)
    report = LossReport(num_samples=len(labels))
    start = time.perf_counter()
    for epoch in range(cfg.classifier_epochs):
        value, gW, gb = classifier_loss_and_grad(W, b, Z, labels)
        if not np.isfinite(value):
            raise NonFiniteLoss(epoch, value)
        report.losses.append(value)
        W = W - cfg.learning_rate * scale * gW
        b = b - cfg.learning_rate * scale * gb
    report.duration_s = time.perf_counter() - start
    return p.replace(secondary_W=W, secondary_b=b), report


def train(train_passes: list[Pass], cfg: TrainConfig,
          norm: NormalizationParams = NormalizationParams()):
    """Predictor first, then the classifier on the frozen LSTM."""
    params, pred_report = train_predictor(train_passes, cfg, norm)
    params, cls_report = train_classifier(train_passes, params, cfg, norm)
    return params, pred_report, cls_report


# -- finite-difference oracle ------------------------------------------------------

def truncated_loss_reference(tensors: dict, squash: str, sequences,
                             frozen: list[tuple[np.ndarray, np.ndarray]],
                             loss: str, span: int) -> float:
    """Loss recomputed sample by sample from frozen states, ``span`` steps back.

    ``frozen[k]`` holds the forward (c, z) arrays of sequence k at every step;
    sample t restarts from the frozen state before step t-span+1 (zeros at the
    pass start) and replays the cell. Deliberately a plain loop, evaluated in
    extended precision so central differences are not swamped by round-off.
    """
    ld = np.longdouble
    P = {k: np.asarray(v, dtype=ld) for k, v in tensors.items()}

    def sig(a):
        return 1 / (1 + np.exp(-a))

    sq = sig if squash == "sigmoid" else np.tanh
    h = P["b_c"].shape[0]
    total, count = ld(0), 0
    for seq, (cs, zs) in zip(sequences, frozen):
        seq = np.asarray(seq, dtype=ld)
        for t in range(len(seq) - 1):
            t0 = max(t - span + 1, 0)
            c = np.asarray(cs[t0 - 1], dtype=ld) if t0 > 0 else np.zeros(h, dtype=ld)
            z = np.asarray(zs[t0 - 1], dtype=ld) if t0 > 0 else np.zeros(h, dtype=ld)
            for u in range(t0, t + 1):
                x = seq[u]
                f = sig(P["W_f"] @ x + P["U_f"] @ z + P["b_f"])
                i = sig(P["W_i"] @ x + P["U_i"] @ z + P["b_i"])
                o = sig(P["W_o"] @ x + P["U_o"] @ z + P["b_o"])
                c = f * c + i * sq(P["W_c"] @ x + P["U_c"] @ z + P["b_c"])
                z = o * sq(c)
            r = P["primary_W"] @ z + P["primary_b"] - seq[t + 1]
            total += np.sum(np.abs(r)) if loss == "abs" else np.sum(r * r)
            count += 1
    return total / (count * seq.shape[1])


@dataclass
class GradientCheck:
    max_rel_error: float
    worst_tensor: str
    n_coords: int
    min_abs_residual: float


def check_gradients(h: int = 3, d: int = 5, seed: int = 0, loss: str = "mse",
                    truncation_span: int = 1, eps: float = 1e-6, lengths=(4, 3),
                    params: LstmParams | None = None, sequences=None,
                    squash: str = "sigmoid") -> GradientCheck:
    """Compare analytic gradients with central differences on every coordinate."""
    if h > 5 or d > 8:
        raise ValidationError("check_gradients is limited to h <= 5, d <= 8")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(h, d, NUM_CLASSES, seed=seed, init_scale=0.5, squash=squash)
        params = params.replace(**{f"b_{g}": rng.normal(0, 0.3, h) for g in GATES},
                                primary_b=rng.normal(0, 0.3, d))
    if sequences is None:
        sequences = [rng.uniform(-1, 1, (n, d)) for n in lengths]
    batch = make_batch(sequences)
    cache = forward(params, batch)
    frozen = [(cache.c[k, :len(s) - 1], cache.z[k, :len(s) - 1]) for k, s in enumerate(sequences)]
    _, grads = predictor_loss_and_grad(params, batch, loss, truncation_span)

    yh = cache.z @ params.primary_W.T + params.primary_b
    resid = np.abs(yh - batch.Y)[batch.mask]
    tensors = params.tensors()
    worst, worst_name, n = 0.0, "", 0
    for name in PREDICTOR_TENSORS:
        base = np.asarray(getattr(params, name), dtype=np.longdouble)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1, -1):
                moved = base.copy()
                moved[idx] += sgn * np.longdouble(eps)
                vals.append(truncated_loss_reference(
                    {**tensors, name: moved}, params.squash, sequences, frozen, loss,
                    truncation_span))
            numeric = float((vals[0] - vals[1]) / (2 * np.longdouble(eps)))
            analytic = grads[name][idx]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            n += 1
            if rel > worst:
                worst, worst_name = rel, name
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                raise NumericalError(f"non-finite gradient at {name}{idx}")
    return GradientCheck(worst, worst_name, n, float(resid.min()) if resid.size else 0.0)


def classification_error(p: LstmParams, passes: list[Pass],
                         norm: NormalizationParams = NormalizationParams()) -> float:
    """Training-set P_error of the secondary head, transition-adjacent steps excluded."""
    batch = batch_from_passes(passes, norm)
    Z = forward(p, batch).z
    pred = softmax(Z @ p.secondary_W.T + p.secondary_b).argmax(axis=-1)
    keep = batch.mask.copy()
    for k, pss in enumerate(passes):
        keep[k, :len(pss) - 1] &= ~pss.transition_mask()[1:]
    return float(np.mean(pred[keep] != batch.labels[keep]))


__all__ = [
    "TrainConfig", "LossReport", "EmptySet", "NonFiniteLoss", "InvalidProbability",
    "loss_abs", "loss_mse", "loss_class", "grad_predictor", "train_predictor",
    "train_classifier", "train", "check_gradients", "ModClass",
]
