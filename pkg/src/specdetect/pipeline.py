"""Glue shared by the CLI and the acceptance harness: either predictor, one call per pass."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baseline_ls, lstm_core
from .core_types import NormalizationParams, Pass, ValidationError
from .detection import (
    DetectionConfig, DetectionEvent, MmseTrace, detect_events, pass_trace, p_error,
)


@dataclass(frozen=True)
class LoadedPredictor:
    kind: str  # "lstm" or "baseline"
    model: object
    norm: NormalizationParams

    @property
    def d(self) -> int:
        return self.model.d

    def predict(self, x_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(normalized predictions for steps 1..T-1, class index per prediction)."""
        if self.kind == "lstm":
            y_hat, probs = lstm_core.predict_arrays(self.model, x_norm)
            return y_hat, probs.argmax(axis=1)
        return baseline_ls.predict_arrays(self.model, x_norm)


def lstm_predictor(params, norm=NormalizationParams()) -> LoadedPredictor:
    return LoadedPredictor("lstm", params, norm)


def baseline_predictor(basis, norm=NormalizationParams()) -> LoadedPredictor:
    return LoadedPredictor("baseline", basis, norm)


def load_predictor(path: str | Path, kind: str = "lstm") -> LoadedPredictor:
    if kind == "lstm":
        params, norm = lstm_core.load_model(path)
        return lstm_predictor(params, norm)
    if kind == "baseline":
        basis, norm = baseline_ls.load_basis(path)
        return baseline_predictor(basis, norm)
    raise ValidationError(f"unknown predictor {kind!r}")


@dataclass
class PassResult:
    pass_id: str
    y_hat: np.ndarray
    classes: np.ndarray
    trace: MmseTrace
    events: list[DetectionEvent]
    p_error: float


def run_pass(pred: LoadedPredictor, p: Pass, L: int = 64,
             cfg: DetectionConfig = DetectionConfig()) -> PassResult:
    if p.spectra.shape[1] != pred.d:
        raise ValidationError(f"pass {p.id} has {p.spectra.shape[1]} bins, model expects {pred.d}")
    y_hat, classes = pred.predict(p.normalized(pred.norm, checked=False))
    trace = pass_trace(p, y_hat, pred.norm, L)
    events = detect_events(trace, p, cfg)
    err = p_error(classes, p.labels[1:], p.transition_mask()[1:])
    return PassResult(p.id, y_hat, classes, trace, events, err)


def step_latencies(params, passes: list[Pass], norm=NormalizationParams(),
                   min_steps: int = 1000) -> np.ndarray:
    """Wall-clock seconds for each single predict+classify step, streaming pass by pass."""
    stream = lstm_core.Predictor(params)
    out = []
    while len(out) < min_steps:
        for p in passes:
            x = p.normalized(norm, checked=False)
            stream.reset()
            for t in range(len(x) - 1):
                start = time.perf_counter()
                stream.step(x[t])
                out.append(time.perf_counter() - start)
            if len(out) >= min_steps:
                break
    return np.array(out)
