"""Shared domain types: spectra, passes, datasets, and the dB <-> [-1, 1] mapping.

Also holds the on-disk pass format (CSV + JSON manifest) and the
error classes raised across the package.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

D_BINS = 1024
FORMAT_VERSION = 1


class SpecDetectError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SpecDetectError):
    pass


class NumericalError(SpecDetectError):
    pass


class AlreadyNormalized(ValidationError):
    pass


class NotNormalized(ValidationError):
    pass


class OutOfRange(ValidationError):
    def __init__(self, index: int, value: float):
        super().__init__(f"bin {index} maps to {value!r}, outside [-1, 1]")
        self.index = index
        self.value = value


class DimensionMismatch(ValidationError):
    pass


class ModClass(enum.IntEnum):
    PSK8_SIGNAL = 0
    PSK8_NOISE = 1
    QAM16_SIGNAL = 2
    QAM16_NOISE = 3


class Modulation(str, enum.Enum):
    PSK8 = "PSK8"
    QAM16 = "QAM16"

    def label(self, frame_sync: int) -> ModClass:
        """Class implied by this modulation and a frame-sync value (0 or 2)."""
        if self is Modulation.PSK8:
            return ModClass.PSK8_SIGNAL if frame_sync == 2 else ModClass.PSK8_NOISE
        return ModClass.QAM16_SIGNAL if frame_sync == 2 else ModClass.QAM16_NOISE


NUM_CLASSES = len(ModClass)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class NormalizationParams:
    a: float = -60.0
    b: float = 60.0

    def __post_init__(self):
        if not self.b > 0:
            raise ValidationError(f"normalization scale must be positive, got {self.b}")


@dataclass(frozen=True, eq=False)
class Spectrum:
    bins: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        bins = _frozen(self.bins)
        if bins.shape != (D_BINS,):
            raise DimensionMismatch(f"spectrum must have {D_BINS} bins, got shape {bins.shape}")
        object.__setattr__(self, "bins", bins)

    def __len__(self):
        return D_BINS


def normalize_array(y: np.ndarray, p: NormalizationParams, checked: bool = True) -> np.ndarray:
    """Affine map of raw dB values into [-1, 1]; raises on anything that leaves it.

    ``checked=False`` applies the same map without the range check, for
    inference on spectra that may carry anomalies (an interferer riding on
    the signal plateau lands above 0 dB).
    """
    out = (np.asarray(y, dtype=float) - p.a) / p.b
    if not checked:
        return out
    bad = np.flatnonzero(~((out >= -1.0) & (out <= 1.0)))
    if bad.size:
        flat = out.reshape(-1)
        i = int(bad[0])
        raise OutOfRange(i % out.shape[-1], float(flat[i]))
    return out


def denormalize_array(y: np.ndarray, p: NormalizationParams) -> np.ndarray:
    return np.asarray(y, dtype=float) * p.b + p.a


def normalize(s: Spectrum, p: NormalizationParams = NormalizationParams()) -> Spectrum:
    if s.normalized:
        raise AlreadyNormalized("spectrum is already normalized")
    return Spectrum(normalize_array(s.bins, p), normalized=True)


def denormalize(s: Spectrum, p: NormalizationParams = NormalizationParams()) -> Spectrum:
    if not s.normalized:
        raise NotNormalized("spectrum is not normalized")
    return Spectrum(denormalize_array(s.bins, p), normalized=False)


@dataclass(frozen=True, eq=False)
class Pass:
    """One satellite pass: raw-dB spectra (T x d) with per-step frame sync and labels.

    Construction does not validate; call :func:`validate_pass` for a report.
    """

    id: str
    modulation: Modulation
    spectra: np.ndarray
    frame_sync: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modulation", Modulation(self.modulation))
        object.__setattr__(self, "spectra", _frozen(self.spectra))
        object.__setattr__(self, "frame_sync", _frozen(self.frame_sync, dtype=np.int64))
        object.__setattr__(self, "labels", _frozen(self.labels, dtype=np.int64))

    def __len__(self):
        return len(self.spectra)

    def spectrum(self, t: int) -> Spectrum:
        return Spectrum(self.spectra[t])

    def normalized(self, p: NormalizationParams = NormalizationParams(),
                   checked: bool = True) -> np.ndarray:
        return normalize_array(self.spectra, p, checked)

    def transition_instants(self) -> np.ndarray:
        """Indices t with frame_sync[t] != frame_sync[t-1]."""
        fs = self.frame_sync
        return np.flatnonzero(fs[1:] != fs[:-1]) + 1

    def transition_mask(self) -> np.ndarray:
        """Boolean mask over steps; True at t-1 and t for every transition instant t."""
        mask = np.zeros(len(self), dtype=bool)
        ts = self.transition_instants()
        mask[ts] = True
        mask[ts - 1] = True
        return mask

    def with_spectra(self, spectra: np.ndarray) -> "Pass":
        return Pass(self.id, self.modulation, spectra, self.frame_sync, self.labels)


@dataclass(frozen=True)
class Dataset:
    train_passes: list[Pass] = field(default_factory=list)
    test_passes: list[Pass] = field(default_factory=list)


def validate_pass(p: Pass) -> list[str]:
    """List every violated Pass invariant; an empty list means the pass is valid."""
    problems = []
    n_spec = len(p.spectra)
    n_fs, n_lab = len(p.frame_sync), len(p.labels)
    if not (n_spec == n_fs == n_lab):
        problems.append(
            f"length mismatch: spectra={n_spec}, frame_sync={n_fs}, labels={n_lab}"
        )
    if min(n_spec, n_fs, n_lab) < 2:
        problems.append("pass must contain at least 2 steps")
    if p.spectra.ndim != 2 or (n_spec and p.spectra.shape[1] != D_BINS):
        problems.append(f"spectra must be T x {D_BINS}, got shape {p.spectra.shape}")
    bad_fs = np.flatnonzero((p.frame_sync != 0) & (p.frame_sync != 2))
    if bad_fs.size:
        problems.append(f"frame_sync outside {{0, 2}} at t={int(bad_fs[0])}")
    n = min(n_fs, n_lab)
    for t in range(n):
        fs = int(p.frame_sync[t])
        if fs not in (0, 2):
            continue
        expected = p.modulation.label(fs)
        if int(p.labels[t]) != expected:
            problems.append(
                f"label inconsistent at t={t}: frame_sync={fs} expects {expected.name}, "
                f"got {int(p.labels[t])}"
            )
            break
    if p.spectra.size and not np.all(np.isfinite(p.spectra)):
        problems.append("non-finite spectrum values")
    return problems


# -- on-disk format ---------------------------------------------------------

def _bin_header() -> list[str]:
    return ["t", "frame_sync"] + [f"bin_{n:04d}" for n in range(D_BINS)]


def write_pass(p: Pass, directory: str | Path) -> Path:
    """Write ``pass.csv`` and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T = len(p)
    table = np.column_stack([np.arange(T), p.frame_sync, p.spectra])
    fmt = ["%d", "%d"] + ["%.10g"] * D_BINS
    np.savetxt(directory / "pass.csv", table, fmt=fmt, delimiter=",",
               header=",".join(_bin_header()), comments="")
    manifest = {
        "id": p.id,
        "modulation": p.modulation.value,
        "num_spectra": T,
        "format_version": FORMAT_VERSION,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def read_pass(directory: str | Path) -> Pass:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported pass format_version {manifest.get('format_version')}")
    csv_path = directory / "pass.csv"
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    if header != _bin_header():
        raise ValidationError(f"{csv_path}: unexpected header")
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    if len(table) != manifest["num_spectra"]:
        raise ValidationError(
            f"{csv_path}: {len(table)} rows but manifest says {manifest['num_spectra']}"
        )
    modulation = Modulation(manifest["modulation"])
    frame_sync = table[:, 1].astype(np.int64)
    labels = [modulation.label(int(fs)) for fs in frame_sync]
    return Pass(manifest["id"], modulation, table[:, 2:], frame_sync, labels)


def write_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for p in ds.train_passes + ds.test_passes:
        write_pass(p, directory / p.id)
    index = {
        "format_version": FORMAT_VERSION,
        "train": [p.id for p in ds.train_passes],
        "test": [p.id for p in ds.test_passes],
    }
    (directory / "dataset.json").write_text(json.dumps(index, indent=2) + "\n")
    return directory


def read_dataset(directory: str | Path, splits=("train", "test")) -> Dataset:
    directory = Path(directory)
    index = json.loads((directory / "dataset.json").read_text())
    loaded = {s: [read_pass(directory / pid) for pid in index[s]] if s in splits else []
              for s in ("train", "test")}
    return Dataset(loaded["train"], loaded["test"])
