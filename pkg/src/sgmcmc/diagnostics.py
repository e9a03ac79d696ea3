"""Sample-quality and predictive metrics.

Kernel Stein discrepancy uses the inverse multi-quadratic kernel
``k(x, y) = (c^2 + |x - y|^2)^beta`` and, per coordinate j, the Stein kernel

    k0_j(x, y) = s_j(x) s_j(y) k + s_j(x) dk/dy_j + s_j(y) dk/dx_j + d2k/dx_j dy_j

where ``s = -grad U`` is the score.  ``KSD = sum_j sqrt(mean_{k,k'} k0_j)``.
Setting ``score_convention="gradient"`` plugs ``grad U`` into the formula
instead, which flips the sign of the two cross terms; under that convention
the Stein kernel does not have zero mean under the target.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

DEFAULT_TILE = 256


@dataclass(frozen=True)
class KsdConfig:
    c: float = 1.0
    beta: float = -0.5
    score_convention: str = "score"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("IMQ constant c must be positive")
        if not -1 < self.beta < 0:
            raise ValueError("IMQ exponent beta must lie in (-1, 0)")
        if self.score_convention not in ("score", "gradient"):
            raise ValueError("score_convention must be 'score' or 'gradient'")


@dataclass(frozen=True)
class ScoredSample:
    """Points (K x d) with their scores ``-grad U`` (or unbiased estimates)."""

    points: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.points, dtype=float))
        S = np.atleast_2d(np.asarray(self.scores, dtype=float))
        if X.shape != S.shape:
            raise ValueError(f"points {X.shape} and scores {S.shape} must match")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(S))):
            raise ValueError("points and scores must be finite")
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "scores", S)

    @classmethod
    def from_gradients(cls, points, grads) -> "ScoredSample":
        return cls(points, -np.asarray(grads, dtype=float))


def imq_kernel_terms(x, y, c: float = 1.0, beta: float = -0.5):
    """Return ``(k, dk/dx, dk/dy, d2k/dx_j dy_j)``; the last three are per-coordinate vectors."""
    KsdConfig(c, beta)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = x - y
    base = c * c + float(diff @ diff)
    k = base ** beta
    b1 = base ** (beta - 1)
    dkdx = 2 * beta * b1 * diff
    dkdy = -dkdx
    d2 = -2 * beta * b1 - 4 * beta * (beta - 1) * base ** (beta - 2) * diff ** 2
    return k, dkdx, dkdy, d2


def _signed(s, cfg: KsdConfig):
    # the "gradient" convention feeds grad U = -score into the same formula
    return s if cfg.score_convention == "score" else -s


def stein_kernel(x, y, s_x, s_y, j: int, cfg: KsdConfig = KsdConfig()) -> float:
    """Stein kernel for coordinate ``j``; ``s_x``, ``s_y`` are scores ``-grad U``."""
    k, dkdx, dkdy, d2 = imq_kernel_terms(x, y, cfg.c, cfg.beta)
    a = _signed(np.asarray(s_x, dtype=float), cfg)[j]
    b = _signed(np.asarray(s_y, dtype=float), cfg)[j]
    return float(a * b * k + a * dkdy[j] + b * dkdx[j] + d2[j])


def _pair_sums_block(Xa, Sa, Xb, Sb, c, beta):
    """Per-coordinate sums of k0_j over all pairs in the (a, b) block."""
    diff = Xa[:, None, :] - Xb[None, :, :]
    base = c * c + np.einsum("ijk,ijk->ij", diff, diff)
    k = base ** beta
    b1 = base ** (beta - 1)
    b2 = base ** (beta - 2)
    # per coordinate: s_a s_b k + s_a dk/dy + s_b dk/dx + d2k
    # with dk/dx = 2 beta b1 diff and dk/dy = -dk/dx
    g = 2 * beta * b1[:, :, None] * diff
    term = (Sa[:, None, :] * Sb[None, :, :]) * k[:, :, None]
    term -= Sa[:, None, :] * g
    term += Sb[None, :, :] * g
    term += (-2 * beta * b1)[:, :, None] - 4 * beta * (beta - 1) * b2[:, :, None] * diff ** 2
    return term.sum(axis=(0, 1))


def ksd_per_dim_sums(sample: ScoredSample, cfg: KsdConfig = KsdConfig(), *,
                     tile: int = DEFAULT_TILE, workers: int | None = None) -> np.ndarray:
    """``sum_{k,k'} k0_j`` for each coordinate, computed over row tiles.

    Tiles are evaluated independently (optionally on a thread pool) and
    reduced in a fixed order, so the result does not depend on ``workers``.
    """
    X = sample.points
    S = _signed(sample.scores, cfg)
    K = X.shape[0]
    if K == 0:
        raise ValueError("KSD needs at least one sample")
    starts = list(range(0, K, tile))
    blocks = [(i, j) for i in starts for j in starts]

    def work(ij):
        i, j = ij
        return _pair_sums_block(X[i:i + tile], S[i:i + tile], X[j:j + tile], S[j:j + tile],
                                cfg.c, cfg.beta)

    if workers is None:
        workers = int(os.environ.get("SGMCMC_WORKERS", "1"))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    total = np.zeros(X.shape[1])
    for p in parts:
        total += p
    return total


def ksd(sample: ScoredSample, cfg: KsdConfig = KsdConfig(), **kw) -> float:
    """Kernel Stein discrepancy ``sum_j sqrt(sum_{k,k'} k0_j / K^2)``."""
    K = sample.points.shape[0]
    sums = ksd_per_dim_sums(sample, cfg, **kw) / K ** 2
    # per-dimension means can dip below zero by round-off for near-perfect samples
    return float(np.sum(np.sqrt(np.clip(sums, 0.0, None))))


def ksd_naive(sample: ScoredSample, cfg: KsdConfig = KsdConfig()) -> float:
    """Reference O(K^2 d) double loop over pairs in plain Python floats."""
    X = sample.points.tolist()
    S = _signed(sample.scores, cfg).tolist()
    K = len(X)
    if K == 0:
        raise ValueError("KSD needs at least one sample")
    d = len(X[0])
    c2, beta = cfg.c ** 2, cfg.beta
    sums = [0.0] * d
    for a in range(K):
        xa, sa = X[a], S[a]
        for b in range(K):
            xb, sb = X[b], S[b]
            diff = [xa[j] - xb[j] for j in range(d)]
            base = c2 + sum(t * t for t in diff)
            k = base ** beta
            b1 = base ** (beta - 1)
            b2 = base ** (beta - 2)
            for j in range(d):
                dkdx = 2 * beta * b1 * diff[j]
                sums[j] += (sa[j] * sb[j] * k - sa[j] * dkdx + sb[j] * dkdx
                            - 2 * beta * b1 - 4 * beta * (beta - 1) * b2 * diff[j] ** 2)
    return sum(math.sqrt(max(s / K ** 2, 0.0)) for s in sums)


# --- effective sample size ---------------------------------------------------

def autocorrelation(x) -> np.ndarray:
    """Normalised sample autocorrelation at all lags, via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    return acov / acov[0]


def ess(x) -> float:
    """Effective sample size with Geyer's initial positive sequence truncation.

    ``ESS = K / (1 + 2 sum_t rho_t)`` where the sum runs over consecutive lag
    pairs while their sum stays positive.  A constant chain returns 0.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("ESS needs a sequence of length >= 10")
    if np.ptp(x) == 0.0:
        warnings.warn("constant chain: effective sample size is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    rho = autocorrelation(x)
    tau = -1.0
    for m in range(0, (n - 1) // 2):
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return float(n / tau)


def ess_per_dim(samples) -> np.ndarray:
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 1 and X.shape[1] >= 10:
        X = X.T
    return np.array([ess(X[:, j]) for j in range(X.shape[1])])


def min_ess(samples) -> float:
    return float(ess_per_dim(samples).min())


# --- predictive metrics ------------------------------------------------------

PROB_CLIP = 1e-12


def posterior_predictive_prob(thetas, X) -> np.ndarray:
    """Mean over samples of ``sigmoid(theta^T x)`` for every row of ``X``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if thetas.shape[0] == 0:
        raise ValueError("need at least one posterior sample")
    return expit(X @ thetas.T).mean(axis=1)


def log_loss_from_probs(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=float), PROB_CLIP, 1 - PROB_CLIP)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty test set")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def log_loss_binary(thetas, X, y) -> float:
    """Held-out log-loss of the posterior predictive mean probability."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty test set")
    thetas = getattr(thetas, "thetas", thetas)
    return log_loss_from_probs(posterior_predictive_prob(thetas, X), y)


def log_loss_multiclass(probabilities, labels) -> float:
    P = np.atleast_2d(np.asarray(probabilities, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if P.shape[0] == 0:
        raise ValueError("empty test set")
    if labels.shape != (P.shape[0],):
        raise ValueError("one label per probability row is required")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("probability rows must sum to 1 (tolerance 1e-9)")
    if np.any(labels < 0) or np.any(labels >= P.shape[1]):
        raise ValueError("label outside the class range")
    p_true = np.clip(P[np.arange(P.shape[0]), labels], PROB_CLIP, None)
    return float(-np.mean(np.log(p_true)))


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(truths, dtype=float).ravel()
    if p.size != t.size:
        raise ValueError("predictions and truths must have equal length")
    if p.size == 0:
        raise ValueError("rmse needs at least one value")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class DiagnosticsReport:
    ksd: float | None = None
    ess_per_dim: list | None = None
    min_ess: float | None = None
    log_loss: float | None = None
    rmse: float | None = None
    wall_clock_sec: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def diagnose_trace(trace, *, want_ksd: bool = True, want_ess: bool = True,
                   cfg: KsdConfig = KsdConfig(), test_X=None, test_y=None) -> DiagnosticsReport:
    """Compute the requested metrics for a stored trace."""
    rep = DiagnosticsReport()
    if want_ksd:
        if trace.grads is None:
            raise ValueError("KSD requested but the trace has no gradient columns")
        rep.ksd = ksd(ScoredSample.from_gradients(trace.thetas, trace.grads), cfg)
    if want_ess:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            e = ess_per_dim(trace.thetas)
        rep.ess_per_dim = [float(v) for v in e]
        rep.min_ess = float(e.min())
    if test_X is not None and test_y is not None:
        rep.log_loss = log_loss_binary(trace.thetas, test_X, test_y)
    return rep
