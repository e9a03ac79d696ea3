"""Complete-recipe SDE engine.

A sampler is an SDE on an augmented state ``zeta = (theta[, rho][, eta])``

    d zeta = 0.5 b(zeta) dt + sqrt(D(zeta)) dB,
    b = -(D + Q) grad H + Gamma,   Gamma_i = sum_j d/dzeta_j (D_ij + Q_ij),

with ``D`` positive semi-definite and ``Q`` skew-symmetric.  Its stationary
law is ``exp(-H)``.  :func:`euler_step` applies the Euler scheme
``zeta + (h/2) b + sqrt(h) L z`` with ``L L^T = D`` (or ``D - h B`` when the
gradient-noise correction is on).

SG-NHT thermostat
-----------------
The shipped SG-NHT spec takes ``H = U + rho.rho/2 + (eta - A)^2 / (2d)`` and
``Q`` with blocks ``Q[rho, eta] = rho/d`` and ``Q[eta, rho] = -rho^T/d``.
Expanding gives drift ``rho`` for theta, ``-grad U - A rho - rho (eta - A)/d^2``
for rho and ``rho.rho/d + Gamma_eta`` for eta, where the only non-zero
divergence term is ``Gamma_eta = sum_j d(-rho_j/d)/d rho_j = -1``.  For
``d = 1`` this is the usual Nose-Hoover friction ``eta rho``.  Under
``exp(-H)`` the eta-marginal is ``N(A, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CorrectionInfeasibleError, DivergenceError

STATE_GUARD = 1e8
PSD_TOL = 1e-10


@dataclass(frozen=True)
class StateLayout:
    dim: int
    momentum: bool = False
    thermostat: bool = False

    @property
    def size(self) -> int:
        return self.dim * (2 if self.momentum else 1) + (1 if self.thermostat else 0)

    @property
    def theta(self) -> slice:
        return slice(0, self.dim)

    @property
    def rho(self) -> slice | None:
        return slice(self.dim, 2 * self.dim) if self.momentum else None

    @property
    def eta(self) -> int | None:
        return self.size - 1 if self.thermostat else None


@dataclass(frozen=True)
class NoiseCorrection:
    """Gradient-noise covariance ``V`` (d x d, theta block) to subtract from the injected noise."""

    enabled: bool = False
    V: np.ndarray | None = None

    def __post_init__(self):
        if self.enabled:
            if self.V is None:
                raise ValueError("an enabled correction needs a covariance estimate V")
            V = np.atleast_2d(np.asarray(self.V, dtype=float))
            if V.shape[0] != V.shape[1]:
                raise ValueError("V must be square")
            object.__setattr__(self, "V", V)


NO_CORRECTION = NoiseCorrection()


@dataclass
class RecipeSpec:
    """One sampler from the complete recipe.

    ``grad_H(zeta, grad_U)`` assembles grad H from a (stochastic) gradient of
    U plus the analytic auxiliary parts.  ``kinetic(zeta)`` is ``H - U``.
    ``D``, ``Q`` and ``Gamma`` are functions of the state; the ``constant_*``
    flags let the step reuse matrices and the noise factor.
    """

    name: str
    layout: StateLayout
    grad_H: Callable[[np.ndarray, np.ndarray], np.ndarray]
    D: Callable[[np.ndarray], np.ndarray]
    Q: Callable[[np.ndarray], np.ndarray]
    Gamma: Callable[[np.ndarray], np.ndarray]
    kinetic: Callable[[np.ndarray], float]
    init_aux: Callable[[np.random.Generator], np.ndarray]
    constant_D: bool = True
    constant_Q: bool = True
    params: dict = field(default_factory=dict)
    _factor_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def size(self) -> int:
        return self.layout.size

    def initial_state(self, theta0, rng: np.random.Generator) -> np.ndarray:
        theta0 = np.asarray(theta0, dtype=float)
        if theta0.shape != (self.dim,):
            raise ValueError(f"theta0 must have shape ({self.dim},)")
        return np.concatenate([theta0, self.init_aux(rng)])

    def noise_factor(self, zeta: np.ndarray, h: float, correction: NoiseCorrection) -> np.ndarray:
        """Factor ``L`` with ``L L^T`` equal to D, or to ``D - h B`` under correction."""
        if not correction.enabled:
            if self.constant_D:
                L = self._factor_cache.get("D")
                if L is None:
                    L = psd_factor(self.D(zeta))
                    self._factor_cache["D"] = L
                return L
            return psd_factor(self.D(zeta))
        key = ("corr", float(h), id(correction))
        if self.constant_D and self.constant_Q and key in self._factor_cache:
            return self._factor_cache[key][1]
        cov = corrected_noise_cov(self.D(zeta), self.Q(zeta), correction.V, h)
        L = psd_factor(cov)
        if self.constant_D and self.constant_Q:
            # keep a reference to the correction so its id cannot be recycled
            self._factor_cache[key] = (correction, L)
        return L


def psd_factor(M: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = M`` for symmetric PSD ``M``.

    Rows and columns that are identically zero are left out of the
    factorisation, so they receive exactly zero noise.  Singular remaining
    blocks fall back to a clipped eigen-decomposition (no longer triangular).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    L = np.zeros_like(M)
    active = np.flatnonzero(np.any(M != 0.0, axis=1) | np.any(M != 0.0, axis=0))
    if active.size == 0:
        return L
    sub = M[np.ix_(active, active)]
    sub = 0.5 * (sub + sub.T)
    try:
        Ls = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(sub)
        if w[0] < -PSD_TOL * max(1.0, abs(w[-1])):
            raise CorrectionInfeasibleError(
                f"matrix is not positive semi-definite (min eigenvalue {w[0]:.3e})",
                min_eigenvalue=float(w[0]))
        Ls = U * np.sqrt(np.clip(w, 0.0, None))
    L[np.ix_(active, active)] = Ls
    assert L.shape == (n, n)
    return L


def corrected_noise_cov(D, Q, V, h: float) -> np.ndarray:
    """``D - h B`` with ``B = (D+Q) V (D+Q)^T / 4``; raises if not PSD.

    ``V`` may be given for the theta block only (d x d); it is embedded in the
    top-left corner of a state-sized zero matrix.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = D.shape[0]
    if V.shape != (n, n):
        d = V.shape[0]
        if d > n or V.shape[1] != d:
            raise ValueError(f"V of shape {V.shape} does not fit a state of size {n}")
        full = np.zeros((n, n))
        full[:d, :d] = V
        V = full
    A = D + Q
    B = 0.25 * A @ V @ A.T
    cov = D - h * B
    cov = 0.5 * (cov + cov.T)
    if np.any(B != 0.0):
        wmin = float(np.linalg.eigvalsh(cov)[0])
        if wmin < -PSD_TOL:
            raise CorrectionInfeasibleError(
                f"corrected noise covariance D - hB is not PSD (min eigenvalue {wmin:.6g}); "
                "the step size is too large for the gradient noise",
                min_eigenvalue=wmin)
    return cov


def drift(spec: RecipeSpec, zeta, grad_H) -> np.ndarray:
    """``b(zeta) = -(D + Q) grad H + Gamma``."""
    zeta = np.asarray(zeta, dtype=float)
    grad_H = np.asarray(grad_H, dtype=float)
    if zeta.shape != (spec.size,) or grad_H.shape != (spec.size,):
        raise ValueError(f"state and grad H must both have length {spec.size}")
    return -((spec.D(zeta) + spec.Q(zeta)) @ grad_H) + spec.Gamma(zeta)


def euler_step(spec: RecipeSpec, zeta, grad_est, h: float,
               correction: NoiseCorrection = NO_CORRECTION,
               rng: np.random.Generator | None = None, z: np.ndarray | None = None) -> np.ndarray:
    """One Euler step ``zeta + (h/2) b + sqrt(h) L z``.

    ``grad_est`` is a gradient estimate of U at the theta block (a vector or
    a :class:`~sgmcmc.estimators.GradientEstimate`).  ``z`` may be supplied
    instead of ``rng`` to fix the standard-normal draw.
    """
    if h < 0:
        raise ValueError("step size must be non-negative")
    zeta = np.asarray(zeta, dtype=float)
    g = getattr(grad_est, "vector", grad_est)
    gH = spec.grad_H(zeta, np.asarray(g, dtype=float))
    b = drift(spec, zeta, gH)
    if z is None:
        z = rng.standard_normal(spec.size)
    L = spec.noise_factor(zeta, h, correction)
    new = zeta + (h / 2) * b + np.sqrt(h) * (L @ z)
    if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > STATE_GUARD:
        raise DivergenceError("state left the finite region (|zeta| > 1e8 or non-finite)")
    return new


# --- shipped specs ----------------------------------------------------------

def make_sgld_spec(d: int) -> RecipeSpec:
    """SGLD: zeta = theta, H = U, D = I, Q = 0."""
    layout = StateLayout(d)
    I = np.eye(d)
    Z = np.zeros((d, d))
    z = np.zeros(d)
    return RecipeSpec(
        name="sgld", layout=layout,
        grad_H=lambda zeta, gU: gU,
        D=lambda zeta: I, Q=lambda zeta: Z, Gamma=lambda zeta: z,
        kinetic=lambda zeta: 0.0,
        init_aux=lambda rng: np.empty(0),
    )


def make_ula_spec(d: int) -> RecipeSpec:
    """ULA is the SGLD recipe driven by the full-data gradient."""
    spec = make_sgld_spec(d)
    spec.name = "ula"
    return spec


def make_sghmc_spec(d: int, C=1.0) -> RecipeSpec:
    """SG-HMC: zeta = (theta, rho), H = U + rho.rho/2, D = diag(0, C), Q = [[0, -I], [I, 0]]."""
    C = np.asarray(C, dtype=float)
    C = C * np.eye(d) if C.ndim == 0 else np.atleast_2d(C)
    if C.shape != (d, d) or not np.allclose(C, C.T):
        raise ValueError("friction C must be a symmetric d x d matrix or a scalar")
    if np.linalg.eigvalsh(C)[0] < -PSD_TOL:
        raise ValueError("friction C must be positive semi-definite")
    layout = StateLayout(d, momentum=True)
    D = np.zeros((2 * d, 2 * d))
    D[d:, d:] = C
    Q = np.zeros((2 * d, 2 * d))
    Q[:d, d:] = -np.eye(d)
    Q[d:, :d] = np.eye(d)
    z = np.zeros(2 * d)
    return RecipeSpec(
        name="sghmc", layout=layout,
        grad_H=lambda zeta, gU: np.concatenate([gU, zeta[d:]]),
        D=lambda zeta: D, Q=lambda zeta: Q, Gamma=lambda zeta: z,
        kinetic=lambda zeta: 0.5 * float(zeta[d:] @ zeta[d:]),
        init_aux=lambda rng: rng.standard_normal(d),
        params={"C": C},
    )


def make_sgnht_spec(d: int, A: float = 1.0) -> RecipeSpec:
    """SG-NHT: zeta = (theta, rho, eta); see the module docstring for the algebra."""
    if not A > 0:
        raise ValueError("thermostat parameter A must be positive")
    layout = StateLayout(d, momentum=True, thermostat=True)
    n = 2 * d + 1
    D = np.zeros((n, n))
    D[d:2 * d, d:2 * d] = A * np.eye(d)
    Q0 = np.zeros((n, n))
    Q0[:d, d:2 * d] = -np.eye(d)
    Q0[d:2 * d, :d] = np.eye(d)
    Gam = np.zeros(n)
    Gam[-1] = -1.0

    def Q(zeta):
        M = Q0.copy()
        rho = zeta[d:2 * d]
        M[d:2 * d, -1] = rho / d
        M[-1, d:2 * d] = -rho / d
        return M

    def grad_H(zeta, gU):
        return np.concatenate([gU, zeta[d:2 * d], [(zeta[-1] - A) / d]])

    def kinetic(zeta):
        rho = zeta[d:2 * d]
        return 0.5 * float(rho @ rho) + (zeta[-1] - A) ** 2 / (2 * d)

    return RecipeSpec(
        name="sgnht", layout=layout, grad_H=grad_H,
        D=lambda zeta: D, Q=Q, Gamma=lambda zeta: Gam,
        kinetic=kinetic,
        init_aux=lambda rng: np.concatenate([rng.standard_normal(d), [A]]),
        constant_Q=False, params={"A": float(A)},
    )


# --- validity checks --------------------------------------------------------

def finite_difference_gamma(spec: RecipeSpec, zeta, eps: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of ``Gamma_i = sum_j d(D_ij + Q_ij)/d zeta_j``."""
    zeta = np.asarray(zeta, dtype=float)
    out = np.zeros(spec.size)
    for j in range(spec.size):
        e = np.zeros(spec.size)
        e[j] = eps
        Mp = spec.D(zeta + e) + spec.Q(zeta + e)
        Mm = spec.D(zeta - e) + spec.Q(zeta - e)
        out += (Mp[:, j] - Mm[:, j]) / (2 * eps)
    return out


def check_spec(spec: RecipeSpec, zeta, fd_tol: float = 1e-5) -> dict:
    """Skewness of Q, PSD-ness of D and Gamma-vs-finite-difference at one state."""
    zeta = np.asarray(zeta, dtype=float)
    Q = spec.Q(zeta)
    D = spec.D(zeta)
    skew = float(np.max(np.abs(Q + Q.T)))
    sym = float(np.max(np.abs(D - D.T)))
    min_eig = float(np.linalg.eigvalsh(0.5 * (D + D.T))[0])
    gamma_err = float(np.max(np.abs(spec.Gamma(zeta) - finite_difference_gamma(spec, zeta))))
    return {
        "skew_error": skew, "D_asymmetry": sym, "D_min_eigenvalue": min_eig,
        "gamma_error": gamma_err,
        "ok": skew <= 1e-12 and sym <= 1e-12 and min_eig >= -PSD_TOL and gamma_err <= fd_tol,
    }


SPEC_BUILDERS = {
    "sgld": lambda d, **kw: make_sgld_spec(d),
    "ula": lambda d, **kw: make_ula_spec(d),
    "sghmc": lambda d, friction=1.0, **kw: make_sghmc_spec(d, friction),
    "sgnht": lambda d, thermostat_A=1.0, **kw: make_sgnht_spec(d, thermostat_A),
}
