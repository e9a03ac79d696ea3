"""Run loops: SGLD, the generic recipe runner and the control-variate pipeline.

Every runner stores post-update states ``theta_k`` for ``k = 1..K`` together
with the gradient estimate evaluated at ``theta_k`` (the one that drives the
next step).  Row ``k`` is kept when ``k > burn_in`` and
``(k - burn_in) % thin == 0``, giving ``floor((K - burn_in) / thin)`` rows.

Random numbers are consumed in a fixed order per iteration: the injected
normal draw first, then the minibatch for the new state.  This makes
:func:`run_sgld` and :func:`run_recipe` with the SGLD spec bit-identical.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics
from .errors import DivergenceError, ParseError
from .estimators import (ControlVariateEstimator, FullEstimator, SgdConfig,
                         SimpleEstimator, cv_prepare)
from .model import PotentialModel


@dataclass(frozen=True)
class StepSchedule:
    """``fixed``: h_k = h0.  ``polynomial``: h_k = h0 (k0 + k)^(-gamma)."""

    kind: str = "fixed"
    h0: float = 0.01
    k0: float = 1.0
    gamma: float = 1 / 3

    def __post_init__(self):
        if self.kind not in ("fixed", "polynomial"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.h0 < 0 or (self.kind == "polynomial" and self.h0 == 0):
            raise ValueError("h0 must be positive")
        if self.kind == "polynomial":
            if self.k0 < 0:
                raise ValueError("k0 must be non-negative")
            if not 0 < self.gamma <= 1:
                raise ValueError("gamma must lie in (0, 1]")
            if self.k0 == 0:
                raise ValueError("k0 = 0 makes h_0 infinite; use k0 > 0")


def step_at(schedule: StepSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("iteration index must be non-negative")
    if schedule.kind == "fixed":
        return schedule.h0
    return schedule.h0 * (schedule.k0 + k) ** (-schedule.gamma)


@dataclass(frozen=True)
class RunConfig:
    iterations: int
    burn_in: int | None = None
    thin: int = 1
    batch_size: int | None = None
    seed: int = 0
    estimator: str = "simple"
    recipe: str = "sgld"
    schedule: StepSchedule = field(default_factory=StepSchedule)
    correction: bool = False
    inner_steps: int = 1
    friction: float = 1.0
    thermostat_A: float = 1.0
    cv_refresh: bool = False
    cv_radius: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.iterations // 2)
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thinning stride must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.estimator not in ("simple", "full", "cv"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.recipe not in dynamics.SPEC_BUILDERS:
            raise ValueError(f"unknown recipe {self.recipe!r}")

    @property
    def n_stored(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def is_stored(self, k: int) -> bool:
        return k > self.burn_in and (k - self.burn_in) % self.thin == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class DivergenceReport:
    iteration: int
    message: str
    kind: str = "divergence"

    def to_dict(self) -> dict:
        return {"error": self.kind, "iteration": self.iteration, "message": self.message}


@dataclass
class Trace:
    thetas: np.ndarray
    grads: np.ndarray | None
    iterations: np.ndarray
    timings: dict = field(default_factory=dict)
    divergence: DivergenceReport | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.thetas.shape[0]

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    @property
    def ok(self) -> bool:
        return self.divergence is None


class _Recorder:
    def __init__(self, config: RunConfig, d: int, record_grads: bool = True):
        M = config.n_stored
        self.config = config
        self.thetas = np.empty((M, d))
        self.grads = np.empty((M, d)) if record_grads else None
        self.iters = np.empty(M, dtype=int)
        self.m = 0

    def offer(self, k: int, theta, grad):
        if self.config.is_stored(k):
            self.thetas[self.m] = theta
            if self.grads is not None:
                self.grads[self.m] = grad
            self.iters[self.m] = k
            self.m += 1

    def trace(self, **kw) -> Trace:
        m = self.m
        grads = None if self.grads is None else self.grads[:m]
        return Trace(self.thetas[:m], grads, self.iters[:m], **kw)


def make_estimator(model: PotentialModel, config: RunConfig, cv_state=None):
    if config.estimator == "full" or config.recipe == "ula":
        return FullEstimator(model)
    n = config.batch_size or model.n_data
    if config.estimator == "cv":
        if cv_state is None:
            raise ValueError("the cv estimator needs a prepared ControlVariateState")
        return ControlVariateEstimator(model, cv_state, n, refresh=config.cv_refresh,
                                       radius=config.cv_radius)
    return SimpleEstimator(model, n)


def run_sgld(model: PotentialModel, config: RunConfig, rng: np.random.Generator,
             estimator=None, theta0=None) -> Trace:
    """SGLD: ``theta_{k+1} = theta_k - (h_k/2) g_k + xi_k``, ``xi_k ~ N(0, h_k I)``.

    ULA is the same loop with the full-data estimator.  Divergence stops the
    run and returns the rows stored so far with a :class:`DivergenceReport`.
    """
    d = model.dim
    est = estimator or make_estimator(model, config)
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    rec = _Recorder(config, d)
    report = None
    t0 = time.perf_counter()
    k = 0
    try:
        g = est.estimate(theta, rng).vector
        for k in range(1, config.iterations + 1):
            h = step_at(config.schedule, k - 1)
            z = rng.standard_normal(d)
            theta = theta - (h / 2) * g + np.sqrt(h) * z
            if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > dynamics.STATE_GUARD:
                raise DivergenceError("state left the finite region (|theta| > 1e8 or non-finite)")
            g = est.estimate(theta, rng).vector
            rec.offer(k, theta, g)
    except DivergenceError as exc:
        report = DivergenceReport(k, str(exc))
    timings = {"sampling": time.perf_counter() - t0}
    return rec.trace(timings=timings, divergence=report,
                     meta={"algorithm": "ula" if est.tag == "full" else "sgld",
                           "estimator": est.tag})


def run_recipe(model: PotentialModel, spec: dynamics.RecipeSpec, config: RunConfig,
               rng: np.random.Generator, estimator=None, theta0=None,
               correction: dynamics.NoiseCorrection = dynamics.NO_CORRECTION) -> Trace:
    """Generic loop of :func:`~sgmcmc.dynamics.euler_step` calls.

    Each stored iteration performs ``config.inner_steps`` Euler steps, each
    with a fresh minibatch.  Auxiliary variables start at ``spec.init_aux``.
    """
    if spec.dim != model.dim:
        raise ValueError("spec and model dimensions differ")
    d = model.dim
    est = estimator or make_estimator(model, config)
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    zeta = spec.initial_state(theta0, rng)
    rec = _Recorder(config, d)
    aux = []
    report = None
    t0 = time.perf_counter()
    k = 0
    step = 0
    try:
        g = est.estimate(zeta[:d], rng).vector
        for k in range(1, config.iterations + 1):
            for _ in range(config.inner_steps):
                h = step_at(config.schedule, step)
                zeta = dynamics.euler_step(spec, zeta, g, h, correction, rng)
                g = est.estimate(zeta[:d], rng).vector
                step += 1
            rec.offer(k, zeta[:d], g)
            if spec.size > d and config.is_stored(k):
                aux.append(zeta[d:].copy())
    except DivergenceError as exc:
        report = DivergenceReport(k, str(exc))
    timings = {"sampling": time.perf_counter() - t0}
    tr = rec.trace(timings=timings, divergence=report,
                   meta={"algorithm": spec.name, "estimator": est.tag})
    if spec.size > d:
        tr.meta["aux"] = np.array(aux) if aux else np.empty((0, spec.size - d))
    tr.meta["final_state"] = zeta
    return tr


def run_cv_pipeline(model: PotentialModel, config: RunConfig, rng: np.random.Generator,
                    sgd: SgdConfig, theta0=None, spec: dynamics.RecipeSpec | None = None,
                    correction: dynamics.NoiseCorrection = dynamics.NO_CORRECTION) -> Trace:
    """SGD to an anchor, cache fill, then sampling started at the anchor with CV gradients."""
    t0 = time.perf_counter()
    state = cv_prepare(model, sgd, rng, theta0=theta0)
    t_opt = time.perf_counter() - t0
    cv_config = replace(config, estimator="cv")
    est = make_estimator(model, cv_config, cv_state=state)
    if spec is None:
        spec = build_spec(config, model.dim)
    if spec.name in ("sgld", "ula"):
        trace = run_sgld(model, cv_config, rng, estimator=est, theta0=state.anchor)
    else:
        trace = run_recipe(model, spec, cv_config, rng, estimator=est, theta0=state.anchor,
                           correction=correction)
    trace.timings = {"optimization": t_opt, **trace.timings}
    trace.meta["anchor"] = state.anchor
    trace.meta["cv_state"] = state
    return trace


def build_spec(config: RunConfig, d: int) -> dynamics.RecipeSpec:
    return dynamics.SPEC_BUILDERS[config.recipe](d, friction=config.friction,
                                                 thermostat_A=config.thermostat_A)


# --- trace serialisation ----------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    _atomic_write_text(Path(path), json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"{type(o).__name__} is not JSON serialisable")


def write_trace(trace: Trace, path, metadata: dict | None = None) -> None:
    """Write ``iter, theta_0.., grad_0..`` CSV plus a JSON sidecar (``<stem>.json``)."""
    path = Path(path)
    d = trace.thetas.shape[1] if trace.thetas.ndim == 2 else 0
    cols = ["iter"] + [f"theta_{j}" for j in range(d)]
    if trace.grads is not None:
        cols += [f"grad_{j}" for j in range(d)]
    lines = [",".join(cols)]
    for m in range(trace.n_samples):
        vals = [str(int(trace.iterations[m]))]
        vals += [format(float(v), ".17g") for v in trace.thetas[m]]
        if trace.grads is not None:
            vals += [format(float(v), ".17g") for v in trace.grads[m]]
        lines.append(",".join(vals))
    _atomic_write_text(path, "\n".join(lines) + "\n")
    side = {"n_samples": trace.n_samples, "dim": d,
            "divergence": None if trace.divergence is None else trace.divergence.to_dict()}
    if metadata:
        side.update(metadata)
    atomic_write_json(path.with_suffix(".json"), side)


def read_trace(path) -> Trace:
    """Parse a trace CSV; gradient columns are optional."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty trace file") from None
        if not header or header[0] != "iter":
            raise ParseError("first column must be 'iter'", row=0, column=header[0] if header else None)
        theta_cols = [c for c in header if c.startswith("theta_")]
        grad_cols = [c for c in header if c.startswith("grad_")]
        d = len(theta_cols)
        if d == 0:
            raise ParseError("no theta_* columns in trace header")
        if theta_cols != [f"theta_{j}" for j in range(d)]:
            raise ParseError("theta columns must be theta_0..theta_{d-1} in order")
        if grad_cols and grad_cols != [f"grad_{j}" for j in range(d)]:
            raise ParseError("grad columns must match theta columns")
        unknown = set(header) - {"iter", *theta_cols, *grad_cols}
        if unknown:
            raise ParseError(f"unexpected columns {sorted(unknown)}")
        iters, rows = [], []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=r)
            try:
                iters.append(int(row[0]))
            except ValueError:
                raise ParseError(f"non-integer iteration {row[0]!r}", row=r, column="iter") from None
            vals = []
            for c, text in zip(header[1:], row[1:]):
                try:
                    v = float(text)
                except ValueError:
                    raise ParseError(f"non-numeric value {text!r}", row=r, column=c) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {text!r}", row=r, column=c)
                vals.append(v)
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
    idx = {c: i for i, c in enumerate(header[1:])}
    thetas = data[:, [idx[c] for c in theta_cols]]
    grads = data[:, [idx[c] for c in grad_cols]] if grad_cols else None
    return Trace(thetas, grads, np.array(iters, dtype=int))
