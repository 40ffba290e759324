"""Forward pass of the spectrum predictor: LSTM cell plus the two dense heads.

The cell uses the logistic function both for the candidate and for squashing
the cell state on output (``squash="sigmoid"``); ``squash="tanh"`` gives the
textbook variant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core_types import (
    D_BINS, FORMAT_VERSION, NUM_CLASSES, DimensionMismatch, ModClass,
    NormalizationParams, NotNormalized, Pass, Spectrum, ValidationError,
)

GATES = ("f", "i", "o", "c")
TENSOR_NAMES = (
    "W_c", "W_f", "W_i", "W_o",
    "U_c", "U_f", "U_i", "U_o",
    "b_c", "b_f", "b_i", "b_o",
    "primary_W", "primary_b", "secondary_W", "secondary_b",
)


def sigmoid(a):
    """Logistic function, split on sign so neither branch overflows."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def _squash(name: str):
    if name == "sigmoid":
        return sigmoid
    if name == "tanh":
        return np.tanh
    raise ValidationError(f"unknown squash {name!r}")


def squash_grad(name: str, value):
    """Derivative of the squash function expressed through its output."""
    if name == "sigmoid":
        return value * (1.0 - value)
    return 1.0 - value * value


def softmax(logits):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class LstmParams:
    W_c: np.ndarray
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    U_c: np.ndarray
    U_f: np.ndarray
    U_i: np.ndarray
    U_o: np.ndarray
    b_c: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    primary_W: np.ndarray
    primary_b: np.ndarray
    secondary_W: np.ndarray
    secondary_b: np.ndarray
    squash: str = "sigmoid"

    def __post_init__(self):
        for name in TENSOR_NAMES:
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        _squash(self.squash)
        h, d, R = self.h, self.d, self.R
        expected = {"W": (h, d), "U": (h, h), "b": (h,)}
        for g in GATES:
            for fam in "WUb":
                name = f"{fam}_{g}"
                if getattr(self, name).shape != expected[fam]:
                    raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, "
                                            f"expected {expected[fam]}")
        heads = {"primary_W": (d, h), "primary_b": (d,),
                 "secondary_W": (R, h), "secondary_b": (R,)}
        for name, shape in heads.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, "
                                        f"expected {shape}")
        for name in TENSOR_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite entries")

    @property
    def h(self) -> int:
        return self.b_c.shape[0]

    @property
    def d(self) -> int:
        return self.W_c.shape[1]

    @property
    def R(self) -> int:
        return self.secondary_b.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def replace(self, **changes) -> "LstmParams":
        return replace(self, **changes)

    def stacked(self):
        """Gate weights stacked in (f, i, o, c) order: (4h x d), (4h x h), (4h,)."""
        W = np.vstack([getattr(self, f"W_{g}") for g in GATES])
        U = np.vstack([getattr(self, f"U_{g}") for g in GATES])
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return W, U, b


def zero_params(h: int = 20, d: int = D_BINS, R: int = NUM_CLASSES, squash="sigmoid") -> LstmParams:
    shapes = {"W": (h, d), "U": (h, h), "b": (h,)}
    kw = {f"{fam}_{g}": np.zeros(shapes[fam]) for g in GATES for fam in "WUb"}
    return LstmParams(primary_W=np.zeros((d, h)), primary_b=np.zeros(d),
                      secondary_W=np.zeros((R, h)), secondary_b=np.zeros(R),
                      squash=squash, **kw)


def init_params(h: int = 20, d: int = D_BINS, R: int = NUM_CLASSES, *, seed: int = 0,
                init_scale: float = 0.1, squash: str = "sigmoid") -> LstmParams:
    """Weight matrices i.i.d. uniform in [-init_scale, init_scale], biases zero."""
    rng = np.random.default_rng(seed)
    zero = zero_params(h, d, R, squash)
    kw = {}
    for name in TENSOR_NAMES:
        arr = getattr(zero, name)
        kw[name] = rng.uniform(-init_scale, init_scale, arr.shape) if arr.ndim == 2 else arr
    return LstmParams(squash=squash, **kw)


@dataclass(frozen=True, eq=False)
class LstmState:
    c: np.ndarray
    z: np.ndarray

    @classmethod
    def zeros(cls, h: int) -> "LstmState":
        return cls(np.zeros(h), np.zeros(h))


@dataclass(frozen=True, eq=False)
class GateActivations:
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    candidate: np.ndarray


def _as_input(p: LstmParams, x) -> np.ndarray:
    if isinstance(x, Spectrum):
        if not x.normalized:
            raise NotNormalized("LSTM input must be a normalized spectrum")
        x = x.bins
    x = np.asarray(x, dtype=float)
    if x.shape != (p.d,):
        raise DimensionMismatch(f"input has shape {x.shape}, expected ({p.d},)")
    return x


def _check_z(p: LstmParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (p.h,):
        raise DimensionMismatch(f"state has shape {z.shape}, expected ({p.h},)")
    return z


def lstm_step(p: LstmParams, x, s: LstmState) -> tuple[LstmState, GateActivations]:
    """Advance the cell by one input. ``x`` is a normalized Spectrum (or raw array of length d)."""
    x = _as_input(p, x)
    c_old, z_old = np.asarray(s.c, dtype=float), _check_z(p, s.z)
    if c_old.shape != (p.h,):
        raise DimensionMismatch(f"cell state has shape {c_old.shape}, expected ({p.h},)")
    squash = _squash(p.squash)
    f = sigmoid(p.W_f @ x + p.U_f @ z_old + p.b_f)
    i = sigmoid(p.W_i @ x + p.U_i @ z_old + p.b_i)
    o = sigmoid(p.W_o @ x + p.U_o @ z_old + p.b_o)
    cand = squash(p.W_c @ x + p.U_c @ z_old + p.b_c)
    c_new = f * c_old + i * cand
    z_new = o * squash(c_new)
    return LstmState(c_new, z_new), GateActivations(f, i, o, cand)


def primary_decode(p: LstmParams, z) -> Spectrum:
    z = _check_z(p, z)
    return Spectrum(p.primary_W @ z + p.primary_b, normalized=True)


def secondary_classify(p: LstmParams, z) -> np.ndarray:
    z = _check_z(p, z)
    return softmax(p.secondary_W @ z + p.secondary_b)


class Predictor:
    """Stateful one-step predictor over a stream of normalized spectra.

    Precomputes the stacked gate weights so each step is two small mat-vecs
    plus the decoder; this is the path latency is measured on.
    """

    def __init__(self, p: LstmParams):
        self.p = p
        self.W, self.U, self.b = p.stacked()
        self._squash = _squash(p.squash)
        self.reset()

    def reset(self):
        h = self.p.h
        self.c = np.zeros(h)
        self.z = np.zeros(h)

    def step(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Consume x_t; return (normalized y_hat_{t+1}, class probabilities for t+1)."""
        h = self.p.h
        a = self.W @ x + self.U @ self.z + self.b
        gates = sigmoid(a[: 3 * h])
        cand = self._squash(a[3 * h:])
        self.c = gates[:h] * self.c + gates[h:2 * h] * cand
        self.z = gates[2 * h:] * self._squash(self.c)
        y_hat = self.p.primary_W @ self.z + self.p.primary_b
        probs = softmax(self.p.secondary_W @ self.z + self.p.secondary_b)
        return y_hat, probs


def predict_arrays(p: LstmParams, x_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced predictions over a (T x d) normalized sequence.

    Returns ``(y_hat, probs)`` of shapes (T-1, d) and (T-1, R); row k is the
    prediction for step k + 1 made after consuming step k.
    """
    x_norm = np.asarray(x_norm, dtype=float)
    if x_norm.ndim != 2 or x_norm.shape[1] != p.d:
        raise DimensionMismatch(f"sequence has shape {x_norm.shape}, expected (T, {p.d})")
    T, h = len(x_norm), p.h
    W, U, b = p.stacked()
    squash = _squash(p.squash)
    drive = x_norm[:-1] @ W.T + b
    Z = np.empty((T - 1, h))
    c = np.zeros(h)
    z = np.zeros(h)
    for t in range(T - 1):
        a = drive[t] + U @ z
        gates = sigmoid(a[: 3 * h])
        c = gates[:h] * c + gates[h:2 * h] * squash(a[3 * h:])
        z = gates[2 * h:] * squash(c)
        Z[t] = z
    y_hat = Z @ p.primary_W.T + p.primary_b
    probs = softmax(Z @ p.secondary_W.T + p.secondary_b)
    return y_hat, probs


def predict_pass(p: LstmParams, pss: Pass,
                 norm: NormalizationParams = NormalizationParams()) -> list[tuple[Spectrum, ModClass]]:
    if len(pss) < 2:
        raise ValidationError("pass must contain at least 2 spectra")
    y_hat, probs = predict_arrays(p, pss.normalized(norm, checked=False))
    classes = probs.argmax(axis=1)
    return [(Spectrum(y, normalized=True), ModClass(int(g))) for y, g in zip(y_hat, classes)]


# -- model file --------------------------------------------------------------

def save_model(p: LstmParams, path: str | Path,
               norm: NormalizationParams = NormalizationParams()) -> Path:
    path = Path(path)
    doc = {"format_version": FORMAT_VERSION, "h": p.h, "d": p.d, "R": p.R,
           "squash": p.squash, "norm": {"a": norm.a, "b": norm.b}}
    doc.update({name: arr.tolist() for name, arr in p.tensors().items()})
    path.write_text(json.dumps(doc))
    return path


def load_model(path: str | Path) -> tuple[LstmParams, NormalizationParams]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format_version {doc.get('format_version')}")
    missing = [name for name in TENSOR_NAMES if name not in doc]
    if missing:
        raise ValidationError(f"model file lacks tensors {missing}")
    p = LstmParams(squash=doc["squash"], **{name: doc[name] for name in TENSOR_NAMES})
    if (p.h, p.d, p.R) != (doc["h"], doc["d"], doc["R"]):
        raise DimensionMismatch("model header disagrees with tensor shapes")
    return p, NormalizationParams(**doc["norm"])
