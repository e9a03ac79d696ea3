"""Tractable Gaussian test-bed.

Target ``N(0, Sigma)`` with ``Sigma = P^T diag(sigma^2) P``.  In rotated
coordinates ``u = P theta`` the SGLD recursion decouples into independent
AR(1) processes

    u_{k+1,j} = (1 - lambda_j) u_{k,j} + e_{k,j},   lambda_j = h / (2 sigma_j^2),

where ``e_k = P (h nu_k + sqrt(h) z_k)`` with ``nu_k ~ N(0, tau^2 I)`` and
``z_k ~ N(0, I)``.  The corresponding gradient estimate is
``Sigma^{-1} theta_k - 2 nu_k``.  Stationarity needs ``h < 4 sigma_d^2``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import dynamics
from .errors import NoStationaryDistributionError
from .estimators import GradientEstimate
from .model import PotentialModel
from .samplers import DivergenceReport, Trace

CHUNK = 1 << 20


def rotation_2d(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class GaussianTarget(PotentialModel):
    """Zero-mean Gaussian with covariance ``P^T diag(variances) P``.

    ``rotation`` defaults to the 2-D rotation by ``angle``; pass an explicit
    orthogonal matrix for other dimensions.  Variances are kept in
    non-increasing order.
    """

    variances: tuple = (2.0, 1.0)
    angle: float = math.pi / 4
    rotation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        var = np.asarray(self.variances, dtype=float).ravel()
        if var.size == 0 or np.any(~np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("variances must be positive and finite")
        if np.any(np.diff(var) > 0):
            raise ValueError("variances must be in non-increasing order")
        d = var.size
        if self.rotation is not None:
            P = np.atleast_2d(np.asarray(self.rotation, dtype=float))
        elif d == 2:
            P = rotation_2d(self.angle)
        else:
            P = np.eye(d)
        if P.shape != (d, d) or np.max(np.abs(P.T @ P - np.eye(d))) > 1e-12:
            raise ValueError("rotation must be a d x d orthogonal matrix")
        var.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "rotation", P)
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "n_data", 1)

    @classmethod
    def standard_normal(cls, d: int = 1) -> "GaussianTarget":
        return cls(tuple([1.0] * d), rotation=np.eye(d))

    @property
    def cov(self) -> np.ndarray:
        P = self.rotation
        return P.T @ np.diag(self.variances) @ P

    @property
    def precision(self) -> np.ndarray:
        P = self.rotation
        return P.T @ np.diag(1.0 / self.variances) @ P

    @property
    def stability_limit(self) -> float:
        """Largest stationary step size (exclusive): ``4 sigma_d^2``."""
        return 4.0 * float(self.variances[-1])

    def to_rotated(self, thetas) -> np.ndarray:
        return np.asarray(thetas, dtype=float) @ self.rotation.T

    def grad_batch(self, theta, indices):
        g = self.precision @ np.asarray(theta, dtype=float)
        return np.tile(g, (len(indices), 1))

    def grad_sum(self, theta, indices=None):
        n = 1 if indices is None else len(indices)
        return n * (self.precision @ np.asarray(theta, dtype=float))

    def potential_batch(self, theta, indices):
        t = np.asarray(theta, dtype=float)
        return np.full(len(indices), 0.5 * t @ self.precision @ t)

    def convexity_constants(self):
        return 1.0 / float(self.variances[0]), 1.0 / float(self.variances[-1])


@dataclass(frozen=True)
class NoiseSpec:
    """Isotropic gradient-noise covariance ``tau2 * I``."""

    tau2: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.tau2) or self.tau2 < 0:
            raise ValueError("tau2 must be finite and non-negative")


def gaussian_grad(target: GaussianTarget, theta, noise: NoiseSpec = NoiseSpec(),
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """``Sigma^{-1} theta + nu`` with ``nu ~ N(0, tau2 I)``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (target.dim,):
        raise ValueError(f"theta must have length {target.dim}")
    g = target.precision @ theta
    if noise.tau2 > 0:
        g = g + math.sqrt(noise.tau2) * rng.standard_normal(target.dim)
    return g


class NoisyGaussianEstimator:
    """Estimator object for the samplers: exact gradient plus ``N(0, grad_var I)``."""

    tag = "noisy"

    def __init__(self, target: GaussianTarget, grad_var: float = 0.0):
        self.target = target
        self.noise = NoiseSpec(grad_var)

    def estimate(self, theta, rng) -> GradientEstimate:
        return GradientEstimate(gaussian_grad(self.target, theta, self.noise, rng), None, self.tag)


def stationary_variance(target: GaussianTarget, h: float, V=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-component stationary variances of the rotated SGLD chain.

    Returns ``(closed, pre_expansion)`` where ``closed = s2 (1 + h V) / (1 - h/(4 s2))``
    and ``pre_expansion = (h^2 V + h) / (1 - (1 - lambda)^2)``.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    s2 = target.variances
    V = np.broadcast_to(np.asarray(V, dtype=float), s2.shape)
    if np.any(V < 0):
        raise ValueError("noise variances must be non-negative")
    if h >= target.stability_limit:
        raise NoStationaryDistributionError(
            f"no stationary distribution: h = {h} >= 4 sigma_d^2 = {target.stability_limit}")
    closed = s2 * (1 + h * V) / (1 - h / (4 * s2))
    lam = h / (2 * s2)
    pre = (h * h * V + h) / (1 - (1 - lam) ** 2)
    return closed, pre


def forgetting_rates(target: GaussianTarget, h: float) -> np.ndarray:
    """Per-step AR coefficients ``1 - lambda_j``."""
    return 1 - h / (2 * target.variances)


def _injected_scale(h: float, noise: NoiseSpec, corrected: bool) -> float:
    """Standard deviation of the sqrt(h)-scaled Brownian part."""
    if not corrected:
        return math.sqrt(h)
    d = 1
    # D - hB with D = I, Q = 0 and gradient-noise covariance 4 tau2
    cov = dynamics.corrected_noise_cov(np.eye(d), np.zeros((d, d)), 4 * noise.tau2 * np.eye(d), h)
    return math.sqrt(h * float(cov[0, 0]))


def _simulate(target, h, noise, K, theta0, rng, burn_in, thin, record_grads, corrected, guard):
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 <= burn_in < K:
        raise ValueError("burn-in must satisfy 0 <= burn_in < K")
    if thin < 1:
        raise ValueError("thinning stride must be >= 1")
    if h <= 0:
        raise ValueError("step size must be positive")
    d = target.dim
    P = target.rotation
    a = forgetting_rates(target, h)
    zscale = _injected_scale(h, noise, corrected)
    tau = math.sqrt(noise.tau2)
    meta = {"h": h, "tau2": noise.tau2, "corrected": corrected}
    if h >= target.stability_limit:
        warnings.warn(f"h = {h} >= 4 sigma_d^2: the chain has no stationary distribution",
                      RuntimeWarning, stacklevel=3)
        meta["unstable"] = True
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    u = P @ theta0
    zi = [np.array([a[j] * u[j]]) for j in range(d)]
    nu_next = tau * rng.standard_normal(d) if tau > 0 else np.zeros(d)
    thetas, grads, iters = [], [], []
    report = None
    t0 = time.perf_counter()
    done = 0
    while done < K:
        m = min(CHUNK, K - done)
        z = rng.standard_normal((m, d))
        if tau > 0:
            nus = np.vstack([nu_next, tau * rng.standard_normal((m, d))])
            step_nu, nu_next = nus[:-1], nus[-1]
            grad_nu = nus[1:]
            noise_orig = h * step_nu + zscale * z
        else:
            grad_nu = None
            noise_orig = zscale * z
        e = noise_orig @ P.T
        U = np.empty((m, d))
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(d):
                # u_{k+1} = a u_k + e_k; the carried state zi = a * u_k
                U[:, j], zi[j] = lfilter([1.0], [1.0, -a[j]], e[:, j], zi=zi[j])
            T = U @ P
        ks = np.arange(done + 1, done + m + 1)
        bad = ~np.all(np.isfinite(T), axis=1) | (np.max(np.abs(np.nan_to_num(T, nan=np.inf)), axis=1) > guard)
        stop = m
        if bad.any():
            stop = int(np.flatnonzero(bad)[0])
            report = DivergenceReport(
                int(ks[stop]), f"state left the finite region (|theta| > {guard:g} or non-finite)"
                f" (iteration {int(ks[stop])})")
        keep = (ks[:stop] > burn_in) & ((ks[:stop] - burn_in) % thin == 0)
        if keep.any():
            thetas.append(T[:stop][keep])
            iters.append(ks[:stop][keep])
            if record_grads:
                Tk = T[:stop][keep]
                g = Tk @ target.precision
                if grad_nu is not None:
                    g = g - 2 * grad_nu[:stop][keep]
                grads.append(g)
        if report is not None:
            break
        done += m
    timings = {"sampling": time.perf_counter() - t0}
    th = np.vstack(thetas) if thetas else np.empty((0, d))
    gr = (np.vstack(grads) if grads else np.empty((0, d))) if record_grads else None
    it = np.concatenate(iters) if iters else np.empty(0, dtype=int)
    meta["algorithm"] = "sgld"
    meta["estimator"] = "gaussian-ar"
    return Trace(th, gr, it, timings=timings, divergence=report, meta=meta)


def ar_simulate(target: GaussianTarget, h: float, noise: NoiseSpec, K: int, theta0=None,
                rng: np.random.Generator | None = None, *, burn_in: int = 0, thin: int = 1,
                record_grads: bool = True, guard: float = dynamics.STATE_GUARD) -> Trace:
    """SGLD on the Gaussian target via the exact rotated AR recursion.

    Stored rows follow the samplers convention (``k > burn_in``,
    ``(k - burn_in) % thin == 0``).  Stored gradients are the noisy
    estimates ``Sigma^{-1} theta_k - 2 nu_k`` that drive step ``k + 1``.
    The run stops at the first state whose magnitude exceeds ``guard``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    return _simulate(target, h, noise, K, theta0, rng, burn_in, thin, record_grads, False, guard)


def corrected_simulate(target: GaussianTarget, h: float, noise: NoiseSpec, K: int,
                       rng: np.random.Generator | None = None, *, theta0=None, burn_in: int = 0,
                       thin: int = 1, record_grads: bool = True,
                       guard: float = dynamics.STATE_GUARD) -> Trace:
    """As :func:`ar_simulate` but with injected noise covariance ``h (1 - h tau2) I``.

    Together with the gradient-noise term the per-step covariance is ``h I``,
    so the stationary variance loses its ``(1 + h V)`` inflation.
    """
    rng = rng if rng is not None else np.random.default_rng()
    return _simulate(target, h, noise, K, theta0, rng, burn_in, thin, record_grads, True, guard)


def rotated_variance(trace: Trace, target: GaussianTarget) -> np.ndarray:
    return np.var(target.to_rotated(trace.thetas), axis=0, ddof=1)


def variance_summary(target: GaussianTarget, h: float, noise: NoiseSpec, trace: Trace,
                     corrected: bool = False) -> dict:
    """``{h, tau2, empirical_var, closed_form_var, abs_rel_err}`` for one run."""
    emp = rotated_variance(trace, target)
    closed, _ = stationary_variance(target, h, 0.0 if corrected else noise.tau2)
    return {
        "h": h, "tau2": noise.tau2,
        "empirical_var": emp.tolist(),
        "closed_form_var": closed.tolist(),
        "abs_rel_err": (np.abs(emp - closed) / closed).tolist(),
    }


def diverges(target: GaussianTarget, h: float, K: int, rng, threshold: float = 1e6,
             noise: NoiseSpec = NoiseSpec()) -> bool:
    """True when some state exceeds ``threshold`` in magnitude within ``K`` steps."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tr = ar_simulate(target, h, noise, K, rng=rng, record_grads=False, guard=threshold)
    return tr.divergence is not None


__all__ = [
    "GaussianTarget", "NoiseSpec", "NoisyGaussianEstimator", "gaussian_grad",
    "stationary_variance", "forgetting_rates", "ar_simulate", "corrected_simulate",
    "rotated_variance", "variance_summary", "diverges", "rotation_2d",
]
