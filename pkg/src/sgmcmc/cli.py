"""Config-driven experiment runner.

Subcommands::

    sgmcmc run CONFIG.json
    sgmcmc sweep CONFIG.json --h 1e-3,1e-2,1e-1,1
    sgmcmc diagnose TRACE.csv [--ksd] [--ess]

Exit codes: 0 success, 2 invalid config/input, 3 divergence, 4 infeasible
variance correction.  ``SGMCMC_WORKERS`` sets the sweep worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import subprocess
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__, diagnostics, dynamics
from .errors import CorrectionInfeasibleError, DivergenceError, OptimizationError, ParseError
from .estimators import SgdConfig
from .gaussian import GaussianTarget, NoiseSpec, NoisyGaussianEstimator, ar_simulate, corrected_simulate
from .logistic import LogisticModel, simulate_logreg
from .model import load_dataset, split_dataset
from .samplers import (RunConfig, StepSchedule, _atomic_write_text, atomic_write_json, build_spec,
                       make_estimator, read_trace, run_cv_pipeline, run_recipe, run_sgld, write_trace)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INFEASIBLE = 0, 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GaussianBlock(_Strict):
    kind: Literal["gaussian"]
    variances: list[float] = [2.0, 1.0]
    angle: float = math.pi / 4
    noise_var: float = Field(0.0, ge=0)


class LogregBlock(_Strict):
    kind: Literal["logreg"]
    n_data: int = Field(10_000, ge=2)
    dim: int = Field(10, ge=1)
    rho: float = Field(0.4, ge=0, lt=1)
    prior_var: float = Field(10.0, gt=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)


class CsvBlock(_Strict):
    kind: Literal["csv"]
    path: str
    label: str
    features: Optional[list[str]] = None
    prior_var: float = Field(10.0, gt=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)


class ScheduleBlock(_Strict):
    kind: Literal["fixed", "polynomial"] = "polynomial"
    h0: float = Field(gt=0)
    k0: float = Field(1.0, gt=0)
    gamma: float = Field(1 / 3, gt=0, le=1)


class SgdBlock(_Strict):
    iterations: int = Field(1000, ge=0)
    h0: float = Field(1e-3, gt=0)
    k0: float = Field(1.0, gt=0)
    gamma: float = Field(1 / 3, gt=0, le=1)
    batch_size: int = Field(1, ge=1)


class SamplerBlock(_Strict):
    algorithm: Literal["sgld", "ula", "sghmc", "sgnht"] = "sgld"
    estimator: Literal["simple", "full", "cv"] = "simple"
    batch_size: Optional[int] = Field(None, ge=1)
    h: Optional[float] = Field(None, gt=0)
    schedule: Optional[ScheduleBlock] = None
    iterations: int = Field(ge=1)
    burn_in: int = Field(0, ge=0)
    thin: int = Field(1, ge=1)
    inner_steps: int = Field(1, ge=1)
    correction: bool = False
    correction_var: Optional[float] = Field(None, ge=0)
    friction: float = Field(1.0, ge=0)
    A: float = Field(1.0, gt=0)
    sgd: SgdBlock = SgdBlock()
    theta0: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if (self.h is None) == (self.schedule is None):
            raise ValueError("give exactly one of 'h' and 'schedule'")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.iterations - self.burn_in < self.thin:
            raise ValueError("no samples would be stored; reduce burn_in or thin")
        return self


class DiagnosticsBlock(_Strict):
    ksd: bool = True
    c: float = Field(1.0, gt=0)
    beta: float = Field(-0.5, gt=-1, lt=0)
    score_convention: Literal["score", "gradient"] = "score"
    ess: bool = True
    log_loss: bool = True


class ExperimentConfig(_Strict):
    seed: int = Field(ge=0)
    output_dir: str
    model: Annotated[Union[GaussianBlock, LogregBlock, CsvBlock], Field(discriminator="kind")]
    sampler: SamplerBlock
    diagnostics: DiagnosticsBlock = DiagnosticsBlock()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return ExperimentConfig.model_validate_json(text)


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


# --- experiment execution ----------------------------------------------------

class RunResult:
    def __init__(self, trace, test=None, timings=None):
        self.trace = trace
        self.test = test
        self.timings = timings or {}


def _run_config(cfg: ExperimentConfig, base_dir: Path | None = None) -> RunResult:
    s = cfg.sampler
    data_seq, run_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng, rng = np.random.default_rng(data_seq), np.random.default_rng(run_seq)
    if s.schedule is None:
        schedule = StepSchedule("fixed", s.h)
    else:
        schedule = StepSchedule(s.schedule.kind, s.schedule.h0, s.schedule.k0, s.schedule.gamma)
    m = cfg.model
    test = None
    if m.kind == "gaussian":
        target = GaussianTarget(tuple(m.variances), m.angle)
        model = target
    elif m.kind == "logreg":
        data, _ = simulate_logreg(m.n_data, m.dim, m.rho, rng=data_rng)
        train, test = split_dataset(data, m.test_fraction, data_rng)
        model = LogisticModel.from_dataset(train, m.prior_var * np.eye(m.dim))
    else:
        path = Path(m.path)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        data = load_dataset(path, m.label, m.features, label_kind="binary")
        train, test = split_dataset(data, m.test_fraction, data_rng)
        d = train.feature_width
        model = LogisticModel.from_dataset(train, m.prior_var * np.eye(d))

    theta0 = None if s.theta0 is None else np.asarray(s.theta0, dtype=float)
    if theta0 is not None and theta0.shape != (model.dim,):
        raise ValueError(f"theta0 must have length {model.dim}")
    batch = s.batch_size
    if batch is None and m.kind != "gaussian":
        # desk-scale default: one percent of the training records
        batch = max(1, round(0.01 * model.n_data))
    if batch is not None and batch > model.n_data:
        raise ValueError(f"batch_size {batch} exceeds the {model.n_data} training records")
    rc = RunConfig(iterations=s.iterations, burn_in=s.burn_in, thin=s.thin, batch_size=batch,
                   seed=cfg.seed, estimator=s.estimator, recipe=s.algorithm, schedule=schedule,
                   correction=s.correction, inner_steps=s.inner_steps, friction=s.friction,
                   thermostat_A=s.A)

    if m.kind == "gaussian":
        # sampler-level gradient noise matching the AR form (see gaussian module)
        grad_var = 4.0 * m.noise_var
        V = s.correction_var if s.correction_var is not None else grad_var
        if s.algorithm in ("sgld", "ula") and schedule.kind == "fixed" and s.inner_steps == 1:
            noise = NoiseSpec(0.0 if s.algorithm == "ula" else m.noise_var)
            sim = corrected_simulate if s.correction else ar_simulate
            kw = {"theta0": theta0, "burn_in": s.burn_in, "thin": s.thin}
            trace = sim(target, schedule.h0, noise, s.iterations, rng=rng, **kw)
            return RunResult(trace, None, dict(trace.timings))
        est = NoisyGaussianEstimator(target, 0.0 if s.algorithm == "ula" else grad_var)
    else:
        est = None
        V = s.correction_var
        if s.correction and V is None:
            raise ValueError("correction on a data model needs sampler.correction_var")

    corr = dynamics.NoiseCorrection(True, V * np.eye(model.dim)) if s.correction else dynamics.NO_CORRECTION
    spec = build_spec(rc, model.dim)
    if s.estimator == "cv" and m.kind != "gaussian":
        sgd = SgdConfig(s.sgd.iterations, s.sgd.h0, s.sgd.k0, s.sgd.gamma,
                        min(s.sgd.batch_size, model.n_data))
        trace = run_cv_pipeline(model, rc, rng, sgd, theta0=theta0, spec=spec, correction=corr)
    elif s.algorithm in ("sgld", "ula") and not s.correction and s.inner_steps == 1:
        trace = run_sgld(model, rc, rng, estimator=est, theta0=theta0)
    else:
        if est is None:
            est = make_estimator(model, rc)
        trace = run_recipe(model, spec, rc, rng, estimator=est, theta0=theta0, correction=corr)
    return RunResult(trace, test, dict(trace.timings))


def _diagnose(result: RunResult, dcfg: DiagnosticsBlock) -> diagnostics.DiagnosticsReport:
    trace = result.trace
    t0 = time.perf_counter()
    want_ksd = dcfg.ksd and trace.n_samples >= 1
    want_ess = dcfg.ess and trace.n_samples >= 10
    kcfg = diagnostics.KsdConfig(dcfg.c, dcfg.beta, dcfg.score_convention)
    test_X = test_y = None
    if dcfg.log_loss and result.test is not None and trace.n_samples >= 1:
        test_X, test_y = result.test.features, result.test.labels
    rep = diagnostics.diagnose_trace(trace, want_ksd=want_ksd, want_ess=want_ess, cfg=kcfg,
                                     test_X=test_X, test_y=test_y)
    rep.wall_clock_sec = {**result.timings, "diagnostics": time.perf_counter() - t0}
    return rep


def cmd_run(config_path) -> int:
    try:
        cfg = load_config(config_path)
    except (OSError, ValidationError, ValueError) as exc:
        return _usage_error(exc)
    base = Path(config_path).resolve().parent
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = base / out
    out.mkdir(parents=True, exist_ok=True)
    echo = {"config": cfg.model_dump(mode="json"), "seed": cfg.seed, "build": build_id(),
            "version": __version__}
    atomic_write_json(out / "config-echo.json", echo)
    try:
        result = _run_config(cfg, base)
    except CorrectionInfeasibleError as exc:
        atomic_write_json(out / "error.json", {"error": "correction_infeasible", "message": str(exc),
                                               "min_eigenvalue": exc.min_eigenvalue})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OptimizationError as exc:
        atomic_write_json(out / "error.json", {"error": "optimization", "message": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DivergenceError as exc:
        atomic_write_json(out / "error.json", {"error": "divergence", "message": str(exc),
                                               "iteration": exc.iteration})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ParseError, ValueError, OSError) as exc:
        return _usage_error(exc)
    trace = result.trace
    write_trace(trace, out / "trace.csv", {"seed": cfg.seed, **_plain_meta(trace.meta)})
    if trace.divergence is not None:
        atomic_write_json(out / "error.json", trace.divergence.to_dict())
        print(f"error: {trace.divergence.message}", file=sys.stderr)
        return EXIT_DIVERGED
    rep = _diagnose(result, cfg.diagnostics)
    _atomic_write_text(out / "diagnostics.json", rep.to_json())
    return EXIT_OK


def _plain_meta(meta: dict) -> dict:
    return {k: v for k, v in meta.items() if isinstance(v, (str, int, float, bool)) or v is None}


def _usage_error(exc) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


# --- sweep -------------------------------------------------------------------

def _sweep_row(args) -> dict:
    cfg_json, base, h = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    cfg = cfg.model_copy(update={"sampler": cfg.sampler.model_copy(update={"h": h, "schedule": None})})
    row = {"h": h, "ksd": float("nan"), "min_ess": float("nan"), "wall_clock": 0.0, "status": "ok"}
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = _run_config(cfg, Path(base))
            if result.trace.divergence is not None:
                row["status"] = "divergence"
            else:
                dcfg = cfg.diagnostics.model_copy(update={"ksd": True, "ess": True, "log_loss": False})
                rep = _diagnose(result, dcfg)
                row["ksd"] = rep.ksd
                row["min_ess"] = rep.min_ess if rep.min_ess is not None else float("nan")
    except CorrectionInfeasibleError:
        row["status"] = "correction_infeasible"
    except (DivergenceError, OptimizationError):
        row["status"] = "divergence"
    except ValueError as exc:
        row["status"] = f"error: {exc}"
    row["wall_clock"] = time.perf_counter() - t0
    return row


def run_sweep(cfg: ExperimentConfig, hs, base: Path, workers: int = 1) -> dict:
    """One chain per step size with the config's seed; rows are independent."""
    jobs = [(cfg.model_dump_json(), str(base), float(h)) for h in hs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    ok = [r for r in rows if r["status"] == "ok" and math.isfinite(r["ksd"])]
    best_ksd = min(ok, key=lambda r: r["ksd"])["h"] if ok else None
    ok_ess = [r for r in ok if math.isfinite(r["min_ess"])]
    best_ess = max(ok_ess, key=lambda r: r["min_ess"])["h"] if ok_ess else None
    return {"rows": rows, "argmin_ksd_h": best_ksd, "argmax_ess_h": best_ess}


def _parse_h_list(text: str) -> list[float]:
    try:
        hs = [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ValueError(f"cannot parse step-size list {text!r}") from None
    if len(hs) < 2:
        raise ValueError("a sweep needs at least two step sizes")
    if len(set(hs)) != len(hs):
        raise ValueError("duplicate step sizes in sweep list")
    if any(not (h > 0 and math.isfinite(h)) for h in hs):
        raise ValueError("step sizes must be positive and finite")
    return hs


def cmd_sweep(config_path, h_text: str) -> int:
    try:
        hs = _parse_h_list(h_text)
        cfg = load_config(config_path)
    except (OSError, ValidationError, ValueError) as exc:
        return _usage_error(exc)
    base = Path(config_path).resolve().parent
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = base / out
    out.mkdir(parents=True, exist_ok=True)
    workers = int(os.environ.get("SGMCMC_WORKERS", "1"))
    report = run_sweep(cfg, hs, base, workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "ksd", "min_ess", "wall_clock", "status"])
    for r in report["rows"]:
        w.writerow([format(r["h"], ".17g"), format(r["ksd"], ".17g"), format(r["min_ess"], ".17g"),
                    format(r["wall_clock"], ".6f"), r["status"]])
    _atomic_write_text(out / "sweep.csv", buf.getvalue())
    atomic_write_json(out / "sweep.json", {**report, "seed": cfg.seed, "build": build_id(),
                                           "version": __version__})
    print(f"argmin KSD h = {report['argmin_ksd_h']}; argmax min-ESS h = {report['argmax_ess_h']}")
    return EXIT_OK


# --- diagnose ----------------------------------------------------------------

def cmd_diagnose(trace_path, want_ksd: bool, want_ess: bool, c: float = 1.0, beta: float = -0.5,
                 convention: str = "score", out_path=None) -> int:
    if not want_ksd and not want_ess:
        want_ksd = want_ess = True
    try:
        kcfg = diagnostics.KsdConfig(c, beta, convention)
        trace = read_trace(trace_path)
    except (OSError, ValueError) as exc:
        return _usage_error(exc)
    if want_ksd and trace.grads is None:
        return _usage_error("KSD requested but the trace has no grad_* columns")
    if trace.n_samples == 0 or (want_ess and trace.n_samples < 10):
        return _usage_error("trace has too few rows for the requested diagnostics")
    t0 = time.perf_counter()
    rep = diagnostics.diagnose_trace(trace, want_ksd=want_ksd, want_ess=want_ess, cfg=kcfg)
    rep.wall_clock_sec = {"diagnostics": time.perf_counter() - t0}
    out = Path(out_path) if out_path else Path(trace_path).with_name("diagnostics-offline.json")
    _atomic_write_text(out, rep.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgmcmc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one configured experiment")
    r.add_argument("config")
    s = sub.add_parser("sweep", help="run one chain per step size")
    s.add_argument("config")
    s.add_argument("--h", required=True, help="comma-separated step sizes, e.g. 1e-3,1e-2,1e-1,1")
    d = sub.add_parser("diagnose", help="recompute diagnostics from a trace CSV")
    d.add_argument("trace")
    d.add_argument("--ksd", action="store_true")
    d.add_argument("--ess", action="store_true")
    d.add_argument("--c", type=float, default=1.0)
    d.add_argument("--beta", type=float, default=-0.5)
    d.add_argument("--score-convention", choices=["score", "gradient"], default="score")
    d.add_argument("--out", default=None, help="output JSON (default: diagnostics-offline.json)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.h)
    return cmd_diagnose(args.trace, args.ksd, args.ess, args.c, args.beta,
                        args.score_convention, args.out)


if __name__ == "__main__":
    sys.exit(main())
