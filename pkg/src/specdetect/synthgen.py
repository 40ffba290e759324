"""Synthetic satellite passes standing in for the proprietary recordings.

Each of the four classes has a fixed dB template; a generated spectrum is its
class template plus i.i.d. Gaussian jitter per bin. A pass is noise, then one
signal episode, then noise again.

Random streams: pass ``k`` (train passes first, then test) draws from
``np.random.SeedSequence([cfg.seed, k])``; the length/transition draws and the
per-step jitter both come from that single generator, in that order.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .core_types import D_BINS, Dataset, ModClass, Modulation, Pass


@dataclass(frozen=True)
class ClassShape:
    """Template parameters for one class.

    ``level_db`` is the passband level relative to the noise floor for noise
    classes (a residual hump; 0 disables it) and the absolute peak offset from
    ``signal_peak_db`` for signal classes.
    """

    level_db: float = 0.0
    band_pad_bins: int = 0
    top_curvature_db: float = 0.0
    tilt_db: float = 0.0


def _default_shapes() -> dict:
    return {
        ModClass.PSK8_SIGNAL: ClassShape(level_db=0.0, band_pad_bins=0, top_curvature_db=2.0),
        ModClass.PSK8_NOISE: ClassShape(level_db=0.0, tilt_db=1.0),
        ModClass.QAM16_SIGNAL: ClassShape(level_db=-6.0, band_pad_bins=16, top_curvature_db=0.5),
        ModClass.QAM16_NOISE: ClassShape(level_db=4.0, band_pad_bins=16, tilt_db=-1.0),
    }


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    pass_length_range: tuple[int, int] = (1197, 1508)
    # Defaults keep both transitions clear of t in [398, 412] and [1098, 1202].
    signal_start_fraction: tuple[float, float] = (0.10, 0.25)
    signal_end_fraction: tuple[float, float] = (0.45, 0.70)
    noise_floor_db: float = -55.0
    signal_peak_db: float = -10.0
    occupied_band: tuple[int, int] = (212, 812)
    edge_rolloff_bins: int = 40
    per_bin_noise_sigma_db: float = 1.0
    class_shape_params: dict = field(default_factory=_default_shapes, hash=False)
    n_train: tuple[int, int] = (4, 4)
    n_test: tuple[int, int] = (3, 3)

    def __post_init__(self):
        lo, hi = self.pass_length_range
        if not 2 <= lo <= hi:
            raise ValueError(f"bad pass_length_range {self.pass_length_range}")
        for name in ("signal_start_fraction", "signal_end_fraction"):
            a, b = getattr(self, name)
            if not 0 < a <= b < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {(a, b)}")
        if self.signal_start_fraction[1] >= self.signal_end_fraction[0]:
            raise ValueError("signal must start before it ends")
        b0, b1 = self.occupied_band
        if not 0 <= b0 < b1 < D_BINS:
            raise ValueError(f"bad occupied_band {self.occupied_band}")

    def _key(self):
        shapes = tuple(sorted((int(k), v) for k, v in self.class_shape_params.items()))
        return (self.noise_floor_db, self.signal_peak_db, tuple(self.occupied_band),
                self.edge_rolloff_bins, shapes)


def _band_envelope(lo: int, hi: int, rolloff: int) -> np.ndarray:
    """0..1 envelope over the bins, 1 inside [lo, hi], raised-cosine edges centred on lo and hi."""
    n = np.arange(D_BINS, dtype=float)
    half = rolloff / 2.0
    env = np.zeros(D_BINS)
    env[(n >= lo + half) & (n <= hi - half)] = 1.0
    for edge, direction in ((lo, 1.0), (hi, -1.0)):
        u = direction * (n - edge) / rolloff + 0.5  # 0 at outer end, 1 at inner end
        inside = (u > 0) & (u < 1)
        env[inside] = 0.5 - 0.5 * np.cos(np.pi * u[inside])
    return env


@lru_cache(maxsize=64)
def _template(cls: ModClass, key) -> np.ndarray:
    noise_floor, peak, band, rolloff, shapes = key
    shape = dict(shapes)[int(cls)]
    lo, hi = band[0] - shape.band_pad_bins, band[1] + shape.band_pad_bins
    n = np.arange(D_BINS, dtype=float)
    floor = noise_floor + shape.tilt_db * (1.0 - 2.0 * n / (D_BINS - 1))
    env = _band_envelope(lo, hi, rolloff)
    if cls in (ModClass.PSK8_SIGNAL, ModClass.QAM16_SIGNAL):
        centre, half_width = (lo + hi) / 2.0, (hi - lo) / 2.0
        u = np.clip((n - centre) / half_width, -1.0, 1.0)
        top = peak + shape.level_db - shape.top_curvature_db * u**2
        out = floor + env * (top - floor)
    else:
        out = floor + env * shape.level_db
    out.flags.writeable = False
    return out


def class_template(cls: ModClass, cfg: SynthConfig) -> np.ndarray:
    """Noise-free dB spectrum for ``cls``; the best achievable one-step prediction."""
    return _template(ModClass(cls), cfg._key())


def gen_spectrum(cls: ModClass, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """One raw-dB spectrum of class ``cls``."""
    return class_template(cls, cfg) + rng.normal(0.0, cfg.per_bin_noise_sigma_db, D_BINS)


def pass_rng(cfg: SynthConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))


def gen_pass(pass_id: str, modulation: Modulation, cfg: SynthConfig,
             rng: np.random.Generator) -> Pass:
    modulation = Modulation(modulation)
    lo, hi = cfg.pass_length_range
    T = int(rng.integers(lo, hi + 1))
    t_on = int(round(T * rng.uniform(*cfg.signal_start_fraction)))
    t_off = int(round(T * rng.uniform(*cfg.signal_end_fraction)))
    t_on = min(max(t_on, 1), T - 2)
    t_off = min(max(t_off, t_on + 1), T - 1)

    frame_sync = np.zeros(T, dtype=np.int64)
    frame_sync[t_on:t_off] = 2
    labels = np.array([modulation.label(fs) for fs in (0, 2)])[frame_sync // 2]

    templates = np.stack([class_template(c, cfg) for c in ModClass])
    jitter = rng.normal(0.0, cfg.per_bin_noise_sigma_db, (T, D_BINS))
    spectra = templates[labels] + jitter
    return Pass(pass_id, modulation, spectra, frame_sync, labels)


def gen_dataset(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Train split A1.., B1..; test split continues the numbering (A5.., B5..)."""
    index = 0
    splits = {}
    offsets = {Modulation.PSK8: 0, Modulation.QAM16: 0}
    for split, counts in (("train", cfg.n_train), ("test", cfg.n_test)):
        passes = []
        for modulation, count, prefix in zip(
                (Modulation.PSK8, Modulation.QAM16), counts, "AB"):
            for _ in range(count):
                offsets[modulation] += 1
                pid = f"{prefix}{offsets[modulation]}"
                passes.append(gen_pass(pid, modulation, cfg, pass_rng(cfg, index)))
                index += 1
        splits[split] = passes
    return Dataset(splits["train"], splits["test"])


def class_fractions(passes: list[Pass]) -> dict[ModClass, float]:
    counts = np.bincount(np.concatenate([p.labels for p in passes]), minlength=len(ModClass))
    total = counts.sum()
    return {c: float(counts[c] / total) for c in ModClass}


def with_overrides(cfg: SynthConfig, overrides: dict) -> SynthConfig:
    """Apply a JSON-style override dict (lists become tuples)."""
    clean = {}
    for k, v in overrides.items():
        if k == "class_shape_params":
            shapes = dict(cfg.class_shape_params)
            for name, params in v.items():
                cls = ModClass[name]
                shapes[cls] = replace(shapes[cls], **params)
            v = shapes
        elif isinstance(v, list):
            v = tuple(v)
        clean[k] = v
    return replace(cfg, **clean)
