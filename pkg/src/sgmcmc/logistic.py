"""Bayesian logistic regression benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .model import DataSet, PotentialModel


@dataclass(frozen=True)
class ConvexityConstants:
    m: float
    M: float

    def __post_init__(self):
        if not (np.isfinite(self.m) and np.isfinite(self.M)) or not 0 < self.m <= self.M:
            raise ValueError("need finite 0 < m <= M")

    @property
    def step_ceiling(self) -> float:
        """Step-size bound ``1 / (M + m)`` suggested by the strong-convexity analysis."""
        return 1.0 / (self.M + self.m)


class LogisticModel(PotentialModel):
    """``U_i(theta) = -log p(y_i | x_i, theta) + theta^T Sigma^{-1} theta / (2N)``."""

    def __init__(self, X, y, prior_cov=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y)
        N, d = X.shape
        if N < 1 or d < 1:
            raise ValueError("need N, d >= 1")
        if y.shape != (N,):
            raise ValueError("one label per row is required")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        S = 10.0 * np.eye(d) if prior_cov is None else np.atleast_2d(np.asarray(prior_cov, dtype=float))
        if S.shape != (d, d):
            raise ValueError("prior covariance must be d x d")
        ev = np.linalg.eigvalsh(0.5 * (S + S.T))
        if ev[0] <= 0:
            raise ValueError("prior covariance must be positive definite")
        self.X = X
        self.y = y.astype(float)
        self.prior_cov = S
        self.prior_prec = np.linalg.inv(S)
        self._prior_eig = ev
        self.n_data = N
        self.dim = d
        X.setflags(write=False)

    @classmethod
    def from_dataset(cls, data: DataSet, prior_cov=None) -> "LogisticModel":
        return cls(data.features, data.labels, prior_cov)

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have shape ({self.dim},)")
        return theta

    def grad_batch(self, theta, indices):
        theta = self._check(theta)
        idx = np.asarray(indices, dtype=int)
        Xs = self.X[idx]
        r = self.y[idx] - expit(Xs @ theta)
        return -r[:, None] * Xs + (self.prior_prec @ theta) / self.n_data

    def grad_sum(self, theta, indices=None):
        theta = self._check(theta)
        if indices is None:
            Xs, ys, n = self.X, self.y, self.n_data
        else:
            idx = np.asarray(indices, dtype=int)
            Xs, ys, n = self.X[idx], self.y[idx], len(idx)
        r = ys - expit(Xs @ theta)
        return -(r @ Xs) + (n / self.n_data) * (self.prior_prec @ theta)

    def potential_batch(self, theta, indices):
        theta = self._check(theta)
        idx = np.asarray(indices, dtype=int)
        t = self.X[idx] @ theta
        # -log p(y|t) = log(1 + e^t) - y t, evaluated stably
        nll = np.logaddexp(0.0, t) - self.y[idx] * t
        return nll + 0.5 * theta @ self.prior_prec @ theta / self.n_data

    def grad_datum(self, theta, i: int) -> np.ndarray:
        if not 0 <= i < self.n_data:
            raise IndexError(f"datum index {i} out of range for N={self.n_data}")
        return self.grad_batch(theta, np.array([i]))[0]

    def convexity_constants(self) -> ConvexityConstants:
        m = 1.0 / self._prior_eig[-1]
        M = 0.25 * float(np.sum(self.X * self.X)) + 1.0 / self._prior_eig[0]
        return ConvexityConstants(float(m), float(M))

    def hessian(self, theta) -> np.ndarray:
        theta = self._check(theta)
        p = expit(self.X @ theta)
        w = p * (1 - p)
        return (self.X * w[:, None]).T @ self.X + self.prior_prec


def ar1_covariance(d: int, rho: float) -> np.ndarray:
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def simulate_logreg(N: int, d: int, rho: float = 0.4, theta_true=None,
                    rng: np.random.Generator | None = None) -> tuple[DataSet, np.ndarray]:
    """Features ``x_i ~ N(0, rho^|i-j|)``, labels ``y_i ~ Bernoulli(sigmoid(theta^T x_i))``.

    ``theta_true`` defaults to a standard-normal draw.
    """
    if N < 1 or d < 1:
        raise ValueError("need N, d >= 1")
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    rng = rng if rng is not None else np.random.default_rng()
    if theta_true is None:
        theta_true = rng.standard_normal(d)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_true.shape != (d,):
        raise ValueError(f"theta_true must have length {d}")
    L = np.linalg.cholesky(ar1_covariance(d, rho))
    X = rng.standard_normal((N, d)) @ L.T
    y = (rng.random(N) < expit(X @ theta_true)).astype(int)
    data = DataSet(X, y, tuple(f"x{j + 1}" for j in range(d)), "y", "binary")
    return data, theta_true


def write_synthetic(data: DataSet, theta_true, path, seed: int, rho: float) -> None:
    """CSV in the dataset schema plus ``<stem>.json`` with generation metadata."""
    path = Path(path)
    data.to_csv(path)
    meta = {"seed": seed, "rho": rho, "theta_true": [float(v) for v in theta_true],
            "n_records": data.n_records, "dim": data.feature_width}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def predict_prob(thetas, x) -> float | np.ndarray:
    """Posterior-mean predictive probability: mean of ``sigmoid(theta_k^T x)``.

    ``x`` may be one point (returns a float) or a matrix of points.
    """
    thetas = np.asarray(getattr(thetas, "thetas", thetas), dtype=float)
    thetas = np.atleast_2d(thetas)
    if thetas.shape[0] == 0 or thetas.size == 0:
        raise ValueError("empty trace")
    x = np.asarray(x, dtype=float)
    p = expit(np.atleast_2d(x) @ thetas.T).mean(axis=1)
    return float(p[0]) if x.ndim == 1 else p


def find_mode(model: LogisticModel, theta0=None, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Newton iterations for the posterior mode (U is strictly convex)."""
    theta = np.zeros(model.dim) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    for _ in range(max_iter):
        g = model.grad_sum(theta)
        step = np.linalg.solve(model.hessian(theta), g)
        theta = theta - step
        if np.max(np.abs(step)) < tol:
            break
    return theta
