"""Unbiased minibatch estimators of the potential gradient.

Three estimators are provided: the simple rescaled subsample sum, the
control-variate estimator centred on cached per-datum gradients, and a
weighted (Poisson-sampling) estimator.  Each has a functional form taking an
explicit batch and an object form used by the samplers, which draws its own
batch from an rng.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, OptimizationError
from .model import MiniBatch, PotentialModel, checked_grad_sum, sample_minibatch

OVERFLOW_GUARD = 1e8


@dataclass(frozen=True)
class GradientEstimate:
    vector: np.ndarray
    batch: MiniBatch | None
    estimator_tag: str


def _as_theta(model: PotentialModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dim,):
        raise ValueError(f"theta must have shape ({model.dim},), got {theta.shape}")
    return theta


def estimate_simple(model: PotentialModel, theta, batch: MiniBatch) -> GradientEstimate:
    """``(N/n) * sum_{i in S} grad U_i(theta)``."""
    theta = _as_theta(model, theta)
    N, n = model.n_data, batch.size
    if n == N:
        g = checked_grad_sum(model, theta)
    else:
        g = (N / n) * checked_grad_sum(model, theta, batch.indices)
    return GradientEstimate(g, batch, "simple")


def estimate_full(model: PotentialModel, theta) -> GradientEstimate:
    theta = _as_theta(model, theta)
    return GradientEstimate(checked_grad_sum(model, theta), None, "full")


# --- control variates -------------------------------------------------------

@dataclass
class ControlVariateState:
    """Cached per-datum anchor gradients ``u_i`` and their running sum.

    ``anchor`` is the point the cache was first filled at.  After
    :func:`cv_refresh_anchors` individual rows may correspond to later
    iterates; the estimator stays unbiased because each ``u_i`` is a constant
    with known sum.
    """

    anchor: np.ndarray
    anchor_grads: np.ndarray
    anchor_sum: np.ndarray
    sgd_iterations: int = 0

    @classmethod
    def at(cls, model: PotentialModel, theta, sgd_iterations: int = 0) -> "ControlVariateState":
        theta = _as_theta(model, theta)
        rows = model.grad_batch(theta, np.arange(model.n_data))
        if not np.all(np.isfinite(rows)):
            bad = int(np.flatnonzero(~np.isfinite(rows).all(axis=1))[0])
            raise DivergenceError(f"non-finite gradient at datum {bad}", datum=bad)
        return cls(theta.copy(), rows, rows.sum(axis=0), sgd_iterations)


@dataclass(frozen=True)
class SgdConfig:
    iterations: int = 1000
    h0: float = 1e-3
    k0: float = 1.0
    gamma: float = 1 / 3
    batch_size: int = 1

    def step(self, k: int) -> float:
        return self.h0 * (self.k0 + k) ** (-self.gamma)


def run_sgd(model: PotentialModel, theta0, config: SgdConfig, rng: np.random.Generator) -> np.ndarray:
    """Stochastic gradient descent on U with the simple estimator."""
    theta = _as_theta(model, theta0).copy()
    n = min(config.batch_size, model.n_data)
    for k in range(config.iterations):
        batch = sample_minibatch(model.n_data, n, rng)
        g = estimate_simple(model, theta, batch).vector
        theta = theta - config.step(k) * g
        if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > OVERFLOW_GUARD:
            raise OptimizationError(f"SGD diverged at iteration {k + 1}; reduce the step size")
    return theta


def cv_prepare(model: PotentialModel, sgd_config: SgdConfig, rng: np.random.Generator,
               theta0=None) -> ControlVariateState:
    """Locate an anchor near the mode by SGD and fill the gradient cache."""
    if theta0 is None:
        theta0 = np.zeros(model.dim)
    anchor = run_sgd(model, theta0, sgd_config, rng)
    return ControlVariateState.at(model, anchor, sgd_config.iterations)


def estimate_cv(model: PotentialModel, cv_state: ControlVariateState, theta,
                batch: MiniBatch) -> GradientEstimate:
    """``sum_i u_i + (N/n) sum_{i in S} (grad U_i(theta) - u_i)``."""
    theta = _as_theta(model, theta)
    N, n = model.n_data, batch.size
    rows = model.grad_batch(theta, batch.indices)
    if not np.all(np.isfinite(rows)):
        bad = int(batch.indices[np.flatnonzero(~np.isfinite(rows).all(axis=1))[0]])
        raise DivergenceError(f"non-finite gradient at datum {bad}", datum=bad)
    diff = (rows - cv_state.anchor_grads[batch.indices]).sum(axis=0)
    return GradientEstimate(cv_state.anchor_sum + (N / n) * diff, batch, "cv")


def cv_refresh_anchors(cv_state: ControlVariateState, batch: MiniBatch, theta_now,
                       model: PotentialModel, rows: np.ndarray | None = None) -> ControlVariateState:
    """Replace cached rows for ``batch`` with gradients at ``theta_now`` in O(n d).

    The state is updated in place and returned.  ``rows`` may pass gradients
    already computed at ``theta_now`` for the batch.
    """
    idx = np.asarray(batch.indices, dtype=int)
    if idx.size == 0:
        return cv_state
    if rows is None:
        rows = model.grad_batch(np.asarray(theta_now, dtype=float), idx)
    if not np.all(np.isfinite(rows)):
        raise DivergenceError("non-finite gradient during anchor refresh")
    cv_state.anchor_sum = cv_state.anchor_sum + (rows - cv_state.anchor_grads[idx]).sum(axis=0)
    cv_state.anchor_grads[idx] = rows
    return cv_state


# --- weighted sampling ------------------------------------------------------

@dataclass(frozen=True)
class WeightScheme:
    """Inclusion probabilities for Poisson sampling; ``sum(weights)`` is the expected batch size."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w <= 0) or np.any(w > 1):
            raise ValueError("every weight must lie in (0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def expected_size(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def uniform(cls, N: int, n: int) -> "WeightScheme":
        return cls(np.full(N, n / N))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return np.flatnonzero(rng.random(self.weights.size) < self.weights)


def estimate_weighted_on(model: PotentialModel, theta, scheme: WeightScheme,
                         included: np.ndarray) -> GradientEstimate:
    """Weighted estimate for a fixed inclusion set."""
    theta = _as_theta(model, theta)
    included = np.asarray(included, dtype=int)
    batch = MiniBatch(included, model.n_data)
    if included.size == 0:
        return GradientEstimate(np.zeros(model.dim), batch, "weighted")
    rows = model.grad_batch(theta, included)
    if not np.all(np.isfinite(rows)):
        raise DivergenceError("non-finite gradient in weighted estimate")
    g = (rows / scheme.weights[included][:, None]).sum(axis=0)
    return GradientEstimate(g, batch, "weighted")


def estimate_weighted(model: PotentialModel, theta, scheme: WeightScheme,
                      rng: np.random.Generator) -> GradientEstimate:
    """``sum_{i in S} grad U_i / w_i`` with i included independently w.p. ``w_i``."""
    if scheme.weights.size != model.n_data:
        raise ValueError("weight vector length must equal N")
    return estimate_weighted_on(model, theta, scheme, scheme.draw(rng))


# --- estimator objects used by the samplers ---------------------------------

class SimpleEstimator:
    tag = "simple"

    def __init__(self, model: PotentialModel, batch_size: int):
        if not 1 <= batch_size <= model.n_data:
            raise ValueError(f"batch size must be in [1, {model.n_data}], got {batch_size}")
        self.model = model
        self.batch_size = batch_size

    def estimate(self, theta, rng) -> GradientEstimate:
        if self.batch_size == self.model.n_data:
            return GradientEstimate(checked_grad_sum(self.model, theta), None, "simple")
        batch = sample_minibatch(self.model.n_data, self.batch_size, rng)
        return estimate_simple(self.model, theta, batch)


class FullEstimator:
    """Exact gradient; consumes no randomness."""

    tag = "full"

    def __init__(self, model: PotentialModel):
        self.model = model

    def estimate(self, theta, rng) -> GradientEstimate:
        return GradientEstimate(checked_grad_sum(self.model, theta), None, "full")


class ControlVariateEstimator:
    """Control-variate estimator with optional anchor refresh and radius switch.

    With ``refresh=True`` the cache rows of each sampled batch are replaced by
    the gradients just computed.  With ``radius`` set, the simple estimator
    is used whenever ``||theta - anchor|| > radius``.
    """

    tag = "cv"

    def __init__(self, model: PotentialModel, state: ControlVariateState, batch_size: int,
                 refresh: bool = False, radius: float | None = None):
        if not 1 <= batch_size <= model.n_data:
            raise ValueError(f"batch size must be in [1, {model.n_data}], got {batch_size}")
        self.model = model
        self.state = state
        self.batch_size = batch_size
        self.refresh = refresh
        self.radius = radius

    def estimate(self, theta, rng) -> GradientEstimate:
        batch = sample_minibatch(self.model.n_data, self.batch_size, rng)
        theta = np.asarray(theta, dtype=float)
        if self.radius is not None and np.linalg.norm(theta - self.state.anchor) > self.radius:
            return estimate_simple(self.model, theta, batch)
        rows = self.model.grad_batch(theta, batch.indices)
        if not np.all(np.isfinite(rows)):
            raise DivergenceError("non-finite gradient in control-variate estimate")
        st = self.state
        N, n = self.model.n_data, batch.size
        g = st.anchor_sum + (N / n) * (rows - st.anchor_grads[batch.indices]).sum(axis=0)
        if self.refresh:
            cv_refresh_anchors(st, batch, theta, self.model, rows=rows)
        return GradientEstimate(g, batch, "cv")


class WeightedEstimator:
    tag = "weighted"

    def __init__(self, model: PotentialModel, scheme: WeightScheme):
        if scheme.weights.size != model.n_data:
            raise ValueError("weight vector length must equal N")
        self.model = model
        self.scheme = scheme

    def estimate(self, theta, rng) -> GradientEstimate:
        return estimate_weighted(self.model, theta, self.scheme, rng)


def variance_probe(estimator, theta, replicates: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical d x d covariance of ``estimator`` at ``theta`` over fresh batches."""
    if replicates < 2:
        raise ValueError("variance_probe needs at least 2 replicates")
    theta = np.asarray(theta, dtype=float)
    draws = np.array([estimator.estimate(theta, rng).vector for _ in range(replicates)])
    # shifting by one draw leaves the covariance unchanged and makes a constant estimator exactly 0
    cov = np.atleast_2d(np.cov(draws - draws[0], rowvar=False))
    return 0.5 * (cov + cov.T)
