"""Potential models, datasets and minibatch sampling.

A target is written as ``pi(theta) ~ exp(-U(theta))`` with
``U(theta) = sum_i U_i(theta)``.  Each per-datum term carries ``1/N`` of the
log prior, so models never add the prior separately.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DivergenceError, ParseError

LABEL_KINDS = ("real", "binary", "categorical")


@dataclass(frozen=True)
class DataSet:
    """N records of real features plus one label column.

    Rows are addressed by 0-based position; error messages that refer to a
    source file use 1-based data-row numbers.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] = ()
    label_name: str = "y"
    label_kind: str = "real"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels)
        if X.shape[0] < 1:
            raise ValueError("empty dataset")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.label_kind!r}")
        X.setflags(write=False)
        y = y.copy()
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if not self.feature_names:
            names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
            object.__setattr__(self, "feature_names", names)

    @property
    def n_records(self) -> int:
        return self.features.shape[0]

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n_records

    def subset(self, indices) -> "DataSet":
        idx = np.asarray(indices, dtype=int)
        return DataSet(self.features[idx], self.labels[idx], self.feature_names,
                       self.label_name, self.label_kind)

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.label_name, *self.feature_names])
            for yi, row in zip(self.labels, self.features):
                w.writerow([_fmt(yi), *(_fmt(v) for v in row)])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class PotentialModel:
    """Base class for targets whose potential is a sum of per-datum terms.

    Subclasses must set ``dim`` and ``n_data`` and implement
    :meth:`grad_batch`.  :meth:`potential_batch` is optional but needed for
    finite-difference checks.  ``grad_sum`` may be overridden with a faster
    path that avoids materialising per-datum rows.
    """

    dim: int
    n_data: int

    def grad_batch(self, theta: np.ndarray, indices: np.ndarray) -> np.ndarray:
        """Per-datum gradients, one row per index (shape ``(len(indices), dim)``)."""
        raise NotImplementedError

    def potential_batch(self, theta: np.ndarray, indices: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} does not provide U_i")

    def grad_datum(self, theta, i: int) -> np.ndarray:
        if not 0 <= i < self.n_data:
            raise IndexError(f"datum index {i} out of range for N={self.n_data}")
        return self.grad_batch(np.asarray(theta, dtype=float), np.array([i]))[0]

    def potential_datum(self, theta, i: int) -> float:
        if not 0 <= i < self.n_data:
            raise IndexError(f"datum index {i} out of range for N={self.n_data}")
        return float(self.potential_batch(np.asarray(theta, dtype=float), np.array([i]))[0])

    def grad_sum(self, theta: np.ndarray, indices: np.ndarray | None = None) -> np.ndarray:
        """Sum of per-datum gradients over ``indices`` (all data when None)."""
        if indices is None:
            indices = np.arange(self.n_data)
        return self.grad_batch(theta, indices).sum(axis=0)

    def potential(self, theta) -> float:
        return float(self.potential_batch(np.asarray(theta, dtype=float),
                                          np.arange(self.n_data)).sum())

    def convexity_constants(self):
        """Strong-convexity pair (m, M) when the model knows it, else None."""
        return None


def _first_bad_datum(model: PotentialModel, theta, indices) -> int | None:
    rows = model.grad_batch(theta, indices)
    bad = np.flatnonzero(~np.isfinite(rows).all(axis=1))
    return int(indices[bad[0]]) if bad.size else None


def checked_grad_sum(model: PotentialModel, theta, indices=None) -> np.ndarray:
    """``model.grad_sum`` with a finiteness check that names the offending datum."""
    g = model.grad_sum(theta, indices)
    if not np.all(np.isfinite(g)):
        idx = np.arange(model.n_data) if indices is None else np.asarray(indices)
        i = _first_bad_datum(model, theta, idx)
        where = f" at datum {i}" if i is not None else ""
        raise DivergenceError(f"non-finite gradient{where}", datum=i)
    return g


def grad_full(model: PotentialModel, theta) -> np.ndarray:
    """Exact gradient of U: the sum of all per-datum gradients."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dim,):
        raise ValueError(f"theta must have shape ({model.dim},), got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameter vector")
    return checked_grad_sum(model, theta)


@dataclass(frozen=True)
class MiniBatch:
    indices: np.ndarray
    n_data: int

    @property
    def size(self) -> int:
        return len(self.indices)


def sample_minibatch(N: int, n: int, rng: np.random.Generator) -> MiniBatch:
    """Uniform random n-subset of range(N), drawn without replacement."""
    if not 1 <= n <= N:
        raise ValueError(f"subsample size must satisfy 1 <= n <= N, got n={n}, N={N}")
    if n == N:
        idx = np.arange(N)
    else:
        idx = rng.choice(N, size=n, replace=False)
    return MiniBatch(idx, N)


def load_dataset(path, label: str, features: Sequence[str] | None = None,
                 label_kind: str = "real") -> DataSet:
    """Read a headed UTF-8 CSV into a :class:`DataSet`.

    ``features`` defaults to every column other than ``label``.  Row numbers
    in errors count data rows from 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty dataset: file has no header") from None
        if label not in header:
            raise ParseError(f"missing label column {label!r}", column=label)
        if features is None:
            features = [h for h in header if h != label]
        for f in features:
            if f not in header:
                raise ParseError(f"missing feature column {f!r}", column=f)
        li = header.index(label)
        fi = [header.index(f) for f in features]
        X, y = [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=r)
            vals = []
            for name, j in zip(features, fi):
                vals.append(_parse_real(row[j], r, name))
            X.append(vals)
            y.append(_parse_real(row[li], r, label))
    if not X:
        raise ParseError("empty dataset")
    labels = np.array(y)
    if label_kind in ("binary", "categorical"):
        if not np.all(labels == np.round(labels)):
            raise ParseError(f"non-integer label in {label_kind} column", column=label)
        labels = labels.astype(int)
        if label_kind == "binary" and not np.isin(labels, (0, 1)).all():
            raise ParseError("binary labels must be 0 or 1", column=label)
    return DataSet(np.array(X, dtype=float).reshape(len(X), len(fi)), labels,
                   tuple(features), label, label_kind)


def _parse_real(text: str, row: int, column: str) -> float:
    try:
        v = float(text.strip().replace("−", "-"))
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", row=row, column=column) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r}", row=row, column=column)
    return v


def split_dataset(data: DataSet, test_fraction: float,
                  rng: np.random.Generator) -> tuple[DataSet, DataSet]:
    """Random disjoint (train, test) split with ``round(test_fraction * N)`` test rows."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    N = data.n_records
    n_test = int(math.floor(test_fraction * N + 0.5))
    perm = rng.permutation(N)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


@dataclass(frozen=True)
class QuadraticModel(PotentialModel):
    """Single-datum Gaussian potential ``U = 0.5 (theta - mean)^T P (theta - mean)``.

    With the default identity precision and zero mean this is the standard
    normal target.
    """

    precision: np.ndarray
    mean: np.ndarray = field(default=None)

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.precision, dtype=float))
        mu = np.zeros(P.shape[0]) if self.mean is None else np.asarray(self.mean, dtype=float)
        object.__setattr__(self, "precision", P)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "dim", P.shape[0])
        object.__setattr__(self, "n_data", 1)

    @classmethod
    def standard_normal(cls, d: int = 1) -> "QuadraticModel":
        return cls(np.eye(d))

    def grad_batch(self, theta, indices):
        g = self.precision @ (np.asarray(theta, dtype=float) - self.mean)
        return np.tile(g, (len(indices), 1))

    def grad_sum(self, theta, indices=None):
        n = 1 if indices is None else len(indices)
        return n * (self.precision @ (np.asarray(theta, dtype=float) - self.mean))

    def potential_batch(self, theta, indices):
        r = np.asarray(theta, dtype=float) - self.mean
        return np.full(len(indices), 0.5 * r @ self.precision @ r)

    def convexity_constants(self):
        ev = np.linalg.eigvalsh(self.precision)
        return float(ev[0]), float(ev[-1])
