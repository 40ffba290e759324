"""Interference injection, the windowed MMSE anomaly score, and event detection.

The score for step t compares the prediction made at t-1 with what arrived at
t, both in dB, and keeps the worst of S = d / L disjoint frequency windows.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, asdict

import numpy as np

from .core_types import (
    D_BINS, DimensionMismatch, NormalizationParams, Pass, Spectrum, ValidationError,
    denormalize_array,
)


class BadWindow(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class EmptyAfterMask(ValidationError):
    pass


@dataclass(frozen=True)
class InterferenceSpec:
    """Parabolic interferer: -gamma * (phi/Phi - beta)^2 + v + delta dB over Phi bins.

    ``noise_scale`` multiplies the standard-normal term v (1.0 for the
    standard model, 0.0 to switch it off).
    """

    gamma: float = 40.0
    beta: float = 0.5
    delta: float = 20.0
    phi_max: int = 300
    start_bin: int = 362
    start_t: int = 0
    duration: int = 1
    noise_seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.phi_max < 1 or self.start_bin < 0 or self.start_bin + self.phi_max > D_BINS:
            raise ValidationError(f"interferer bins [{self.start_bin}, "
                                  f"{self.start_bin + self.phi_max}) do not fit in {D_BINS}")
        if self.duration < 1:
            raise ValidationError("duration must be at least 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must lie in [0, 1]")
        if self.start_t < 0:
            raise ValidationError("start_t must be non-negative")

    @property
    def end_t(self) -> int:
        return self.start_t + self.duration

    def windows(self, L: int) -> tuple[int, int]:
        """Inclusive range of L-bin windows the interferer touches."""
        return self.start_bin // L, (self.start_bin + self.phi_max - 1) // L


def interference_profile(spec: InterferenceSpec, step: int = 0) -> np.ndarray:
    """Additive dB profile for the ``step``-th affected spectrum (fresh noise per step)."""
    phi = np.arange(spec.phi_max, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([spec.noise_seed, step]))
    v = rng.standard_normal(spec.phi_max) * spec.noise_scale
    out = np.zeros(D_BINS)
    out[spec.start_bin:spec.start_bin + spec.phi_max] = (
        -spec.gamma * (phi / spec.phi_max - spec.beta) ** 2 + v + spec.delta)
    return out


def inject(p: Pass, spec: InterferenceSpec) -> Pass:
    if spec.end_t > len(p):
        raise OutOfBounds(f"interferer [{spec.start_t}, {spec.end_t}) exceeds pass length {len(p)}")
    spectra = np.array(p.spectra)
    for k in range(spec.duration):
        spectra[spec.start_t + k] += interference_profile(spec, k)
    return p.with_spectra(spectra)


# -- scoring -------------------------------------------------------------------

def _db(s, norm: NormalizationParams, normalized_default: bool) -> np.ndarray:
    if isinstance(s, Spectrum):
        return denormalize_array(s.bins, norm) if s.normalized else np.asarray(s.bins)
    s = np.asarray(s, dtype=float)
    return denormalize_array(s, norm) if normalized_default else s


def window_mse(pred_db: np.ndarray, actual_db: np.ndarray, L: int) -> np.ndarray:
    """Block-mean squared error over disjoint L-bin windows; shape (..., d // L)."""
    if pred_db.shape != actual_db.shape:
        raise DimensionMismatch(f"prediction {pred_db.shape} vs actual {actual_db.shape}")
    d = pred_db.shape[-1]
    if L < 1 or d % L:
        raise BadWindow(f"window length {L} does not divide {d}")
    e = (pred_db - actual_db) ** 2
    return e.reshape(e.shape[:-1] + (d // L, L)).mean(axis=-1)


def mmse_score(prediction, actual, norm: NormalizationParams = NormalizationParams(),
               L: int = 64) -> tuple[float, int]:
    """(max block MSE in dB^2, index of that block); bare arrays are taken as normalized."""
    w = window_mse(_db(prediction, norm, True), _db(actual, norm, True), L)
    j = int(np.argmax(w))
    return float(w[j]), j


@dataclass(frozen=True, eq=False)
class MmseTrace:
    t: np.ndarray
    mmse: np.ndarray
    argmax_window: np.ndarray
    window_length: int
    num_windows: int

    def __len__(self):
        return len(self.mmse)


def mmse_trace(predictions, actuals, norm: NormalizationParams = NormalizationParams(),
               L: int = 64, *, actual_normalized: bool = True, t0: int = 1) -> MmseTrace:
    """Score aligned predictions/actuals; entry k is labelled with time t0 + k."""
    pred = np.array([_db(s, norm, True) for s in predictions]) if not isinstance(
        predictions, np.ndarray) else _db(predictions, norm, True)
    act = np.array([_db(s, norm, actual_normalized) for s in actuals]) if not isinstance(
        actuals, np.ndarray) else _db(actuals, norm, actual_normalized)
    if len(pred) != len(act):
        raise DimensionMismatch(f"{len(pred)} predictions vs {len(act)} actual spectra")
    w = window_mse(pred, act, L)
    j = np.argmax(w, axis=1)
    return MmseTrace(np.arange(t0, t0 + len(w)), w[np.arange(len(w)), j], j, L, w.shape[1])


def pass_trace(p: Pass, y_hat_norm: np.ndarray, norm: NormalizationParams = NormalizationParams(),
               L: int = 64) -> MmseTrace:
    """Trace of a pass against predictions for steps 1..T-1."""
    return mmse_trace(y_hat_norm, p.spectra[1:], norm, L, actual_normalized=False, t0=1)


# -- events --------------------------------------------------------------------

class EventKind(str, enum.Enum):
    INTERFERENCE = "INTERFERENCE"
    TRANSITION_SPIKE = "TRANSITION_SPIKE"


@dataclass(frozen=True)
class DetectionEvent:
    start_t: int
    end_t: int
    freq_window_range: tuple[int, int]
    kind: EventKind
    peak_mmse: float

    def to_json(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["freq_window_range"] = list(self.freq_window_range)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "DetectionEvent":
        return cls(int(doc["start_t"]), int(doc["end_t"]),
                   tuple(int(v) for v in doc["freq_window_range"]),
                   EventKind(doc["kind"]), float(doc.get("peak_mmse", 0.0)))


@dataclass(frozen=True)
class DetectionConfig:
    """Threshold settings.

    ``warmup_steps`` leading trace entries are left out of both the
    statistics and the events: the state is zero at the start of a pass and
    the first predictions are a cold start, not an observation about the signal.
    """

    k_int: float = 10.0
    spike_factor: float = 20.0
    max_spike_width: int = 2
    warmup_steps: int = 2
    spike_gap: int = 1

    def __post_init__(self):
        if self.warmup_steps < 0 or self.spike_gap < 0 or self.max_spike_width < 1:
            raise ValidationError(
                "warmup_steps and spike_gap must be >= 0, max_spike_width >= 1")


def thresholds(mmse: np.ndarray, cfg: DetectionConfig = DetectionConfig()) -> tuple[float, float]:
    """(interference threshold, spike threshold) from the trace's median and MAD."""
    m = float(np.median(mmse))
    mad = float(np.median(np.abs(mmse - m)))
    theta_int = m + cfg.k_int * mad
    return theta_int, cfg.spike_factor * theta_int


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], flags.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def detect_events(trace: MmseTrace, p: Pass | None = None,
                  cfg: DetectionConfig = DetectionConfig()) -> list[DetectionEvent]:
    """Runs above the interference threshold, with short spikes at transitions set apart.

    A run is a TRANSITION_SPIKE when it touches a frame-sync transition (t-1,
    t or t+1 of a transition instant t) and between 1 and ``max_spike_width``
    of its steps exceed the spike threshold; its shoulder above the
    interference threshold belongs to the same event, as does a settling
    tail that resumes within ``spike_gap`` steps and stays below the spike
    threshold.
    """
    skip = min(cfg.warmup_steps, len(trace.mmse))
    mmse = np.asarray(trace.mmse)[skip:]
    t_axis = np.asarray(trace.t)[skip:]
    wins_all = np.asarray(trace.argmax_window)[skip:]
    if len(mmse) == 0:
        return []
    theta_int, theta_spike = thresholds(mmse, cfg)
    near_transition = np.zeros(len(mmse), dtype=bool)
    if p is not None:
        for tau in p.transition_instants():
            for t in (tau - 1, tau, tau + 1):
                k = t - int(t_axis[0])
                if 0 <= k < len(mmse):
                    near_transition[k] = True
    events = []
    for s, e in _runs(mmse > theta_int):
        seg = mmse[s:e]
        n_spike = int(np.sum(seg > theta_spike))
        if near_transition[s:e].any() and 1 <= n_spike <= cfg.max_spike_width:
            kind = EventKind.TRANSITION_SPIKE
        else:
            kind = EventKind.INTERFERENCE
        prev = events[-1] if events else None
        if (prev is not None and prev.kind is EventKind.TRANSITION_SPIKE and n_spike == 0
                and int(t_axis[s]) - prev.end_t <= cfg.spike_gap):
            s = int(np.searchsorted(t_axis, prev.start_t))
            kind = prev.kind
            events.pop()
        wins = wins_all[s:e]
        events.append(DetectionEvent(int(t_axis[s]), int(t_axis[e - 1]) + 1,
                                     (int(wins.min()), int(wins.max())), kind,
                                     float(mmse[s:e].max())))
    return events


# -- evaluation ------------------------------------------------------------------

def p_error(predicted_labels, true_labels, transition_mask=None) -> float:
    """Fraction of misclassified steps; ``transition_mask`` marks steps to leave out."""
    pred = np.asarray(predicted_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise DimensionMismatch(f"{pred.shape} predicted vs {true.shape} true labels")
    keep = np.ones(len(true), dtype=bool) if transition_mask is None else ~np.asarray(
        transition_mask, dtype=bool)
    if not keep.any():
        raise EmptyAfterMask("no steps left after masking")
    return float(np.mean(pred[keep] != true[keep]))


def ground_truth_events(p: Pass, interferers: list[InterferenceSpec], L: int = 64
                        ) -> list[DetectionEvent]:
    """Expected events: one per interferer plus a spike at each frame-sync transition."""
    out = [DetectionEvent(s.start_t, s.end_t, s.windows(L), EventKind.INTERFERENCE, 0.0)
           for s in interferers]
    out += [DetectionEvent(int(tau), int(tau) + 1, (0, D_BINS // L - 1),
                           EventKind.TRANSITION_SPIKE, 0.0) for tau in p.transition_instants()]
    return sorted(out, key=lambda ev: ev.start_t)


def event_matches(found: DetectionEvent, truth: DetectionEvent, t_tol: int = 2,
                  window_tol: int = 1) -> bool:
    if found.kind != truth.kind:
        return False
    if found.kind is EventKind.TRANSITION_SPIKE:
        return truth.start_t - t_tol <= found.start_t <= truth.start_t + t_tol
    return (abs(found.start_t - truth.start_t) <= t_tol
            and abs(found.end_t - truth.end_t) <= t_tol
            and found.freq_window_range[0] >= truth.freq_window_range[0] - window_tol
            and found.freq_window_range[1] <= truth.freq_window_range[1] + window_tol)


def exact_match(found: list[DetectionEvent], truth: list[DetectionEvent], t_tol: int = 2,
                window_tol: int = 1) -> bool:
    """True when ``found`` and ``truth`` pair up one-to-one under the tolerances."""
    if len(found) != len(truth):
        return False
    unused = list(truth)
    for ev in found:
        hit = next((g for g in unused if event_matches(ev, g, t_tol, window_tol)), None)
        if hit is None:
            return False
        unused.remove(hit)
    return True


def precision_recall(found: list[DetectionEvent], truth: list[DetectionEvent],
                     kind: EventKind = EventKind.INTERFERENCE, t_tol: int = 2,
                     window_tol: int = 1) -> tuple[float, float]:
    f = [e for e in found if e.kind is kind]
    g = [e for e in truth if e.kind is kind]
    tp_found = sum(any(event_matches(e, t, t_tol, window_tol) for t in g) for e in f)
    tp_truth = sum(any(event_matches(e, t, t_tol, window_tol) for e in f) for t in g)
    precision = tp_found / len(f) if f else 1.0
    recall = tp_truth / len(g) if g else 1.0
    return precision, recall
