"""Model-based comparison predictor: least-squares fit onto the four class-mean spectra.

The basis lives in normalized space so it consumes exactly what the LSTM
consumes. The weights fitted to y_t serve as the prediction for t+1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core_types import (
    D_BINS, FORMAT_VERSION, DimensionMismatch, ModClass, NormalizationParams,
    NumericalError, Pass, Spectrum, ValidationError,
)

RANK_TOL = 1e-8
DEGENERATE_SUM = 1e-12


class RankDeficient(NumericalError):
    pass


class MissingClass(ValidationError):
    def __init__(self, cls: ModClass):
        super().__init__(f"no training spectra of class {cls.name}")
        self.cls = cls


class DegenerateWeights(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    A: np.ndarray
    column_classes: tuple = tuple(ModClass)
    counts: tuple = (1, 1, 1, 1)

    def __post_init__(self):
        A = np.array(self.A, dtype=float, copy=True)
        if A.ndim != 2 or A.shape[1] != len(self.column_classes):
            raise DimensionMismatch(f"basis must be d x {len(self.column_classes)}, got {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValidationError("basis contains non-finite values")
        A.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "column_classes", tuple(ModClass(c) for c in self.column_classes))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        gram = A.T @ A
        sv = np.linalg.svd(gram, compute_uv=False)
        if not sv[-1] > RANK_TOL * sv[0]:
            raise RankDeficient(f"basis Gram matrix is rank deficient (singular values {sv})")
        object.__setattr__(self, "_chol", cho_factor(gram))

    @property
    def d(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class BasisWeights:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise NumericalError("non-finite basis weights")
        object.__setattr__(self, "theta", theta)


def compute_basis(train: list[Pass], norm: NormalizationParams = NormalizationParams()) -> BasisMatrix:
    """Column r is the mean normalized spectrum of class r over the training passes."""
    sums = np.zeros((D_BINS, len(ModClass)))
    counts = np.zeros(len(ModClass), dtype=np.int64)
    for p in train:
        y = p.normalized(norm)
        for cls in ModClass:
            sel = p.labels == cls
            sums[:, cls] += y[sel].sum(axis=0)
            counts[cls] += int(sel.sum())
    for cls in ModClass:
        if counts[cls] == 0:
            raise MissingClass(cls)
    return BasisMatrix(sums / counts, tuple(ModClass), tuple(counts))


def _vector(y, d: int) -> np.ndarray:
    if isinstance(y, Spectrum):
        y = y.bins
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != d:
        raise DimensionMismatch(f"spectrum has {y.shape[-1]} bins, basis has {d}")
    return y


def ls_fit(basis: BasisMatrix, y) -> BasisWeights:
    """theta = (A^T A)^{-1} A^T y via a Cholesky factor of the 4x4 Gram matrix."""
    y = _vector(y, basis.d)
    return BasisWeights(cho_solve(basis._chol, basis.A.T @ y))


def ls_fit_many(basis: BasisMatrix, Y: np.ndarray) -> np.ndarray:
    """Row-wise ls_fit for a (T x d) stack; returns (T x 4)."""
    Y = _vector(Y, basis.d)
    return cho_solve(basis._chol, basis.A.T @ Y.T).T


def ls_predict(basis: BasisMatrix, w: BasisWeights) -> Spectrum:
    return Spectrum(basis.A @ np.asarray(w.theta if isinstance(w, BasisWeights) else w),
                    normalized=True)


def ls_classify(w: BasisWeights, basis: BasisMatrix) -> ModClass:
    """Class whose sum-normalized weight is largest; ties go to the lowest index."""
    theta = np.asarray(w.theta if isinstance(w, BasisWeights) else w, dtype=float)
    total = theta.sum()
    if total <= DEGENERATE_SUM:
        raise DegenerateWeights(f"basis weights sum to {total}")
    return basis.column_classes[int(np.argmax(theta / total))]


def predict_arrays(basis: BasisMatrix, x_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same contract as the LSTM's: row k predicts step k+1 from step k.

    Classes come back as integers, -1 where the weights are degenerate.
    """
    theta = ls_fit_many(basis, np.asarray(x_norm, dtype=float)[:-1])
    y_hat = theta @ basis.A.T
    total = theta.sum(axis=1)
    order = np.array([int(c) for c in basis.column_classes])
    with np.errstate(divide="ignore", invalid="ignore"):
        classes = order[np.argmax(theta / total[:, None], axis=1)]
    classes = np.where(total > DEGENERATE_SUM, classes, -1)
    return y_hat, classes


def save_basis(basis: BasisMatrix, path: str | Path,
               norm: NormalizationParams = NormalizationParams()) -> Path:
    path = Path(path)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "ls_basis",
        "d": basis.d,
        "norm": {"a": norm.a, "b": norm.b},
        "column_classes": [c.name for c in basis.column_classes],
        "counts": list(basis.counts),
        "columns": basis.A.T.tolist(),
    }
    path.write_text(json.dumps(doc))
    return path


def load_basis(path: str | Path) -> tuple[BasisMatrix, NormalizationParams]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "ls_basis":
        raise ValidationError(f"{path} is not a version-{FORMAT_VERSION} basis file")
    basis = BasisMatrix(np.array(doc["columns"]).T,
                        tuple(ModClass[n] for n in doc["column_classes"]),
                        tuple(doc["counts"]))
    return basis, NormalizationParams(**doc["norm"])
