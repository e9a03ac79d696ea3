import json
import math

import numpy as np
import pytest

from sgmcmc.cli import ExperimentConfig, main, run_sweep
from sgmcmc.logistic import simulate_logreg


def _write(tmp_path, sampler, model=None, diagnostics=None, name="cfg.json", **extra):
    cfg = {"seed": 3, "output_dir": "out",
           "model": model or {"kind": "gaussian"},
           "sampler": sampler}
    if diagnostics is not None:
        cfg["diagnostics"] = diagnostics
    cfg.update(extra)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


GAUSS = {"algorithm": "sgld", "estimator": "full", "h": 0.1, "iterations": 10_000, "thin": 10}


def test_run_writes_artifacts(tmp_path):
    cfg = _write(tmp_path, GAUSS)
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    for f in ("trace.csv", "config-echo.json", "diagnostics.json"):
        assert (out / f).exists()
    diag = json.loads((out / "diagnostics.json").read_text())
    assert math.isfinite(diag["ksd"])
    echo = json.loads((out / "config-echo.json").read_text())
    assert echo["seed"] == 3 and "build" in echo
    assert echo["config"]["sampler"]["burn_in"] == 0


def test_run_is_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for d in (a, b):
        assert main(["run", str(_write(d, GAUSS))]) == 0
    assert (a / "out/trace.csv").read_bytes() == (b / "out/trace.csv").read_bytes()
    assert (a / "out/trace.json").read_bytes() == (b / "out/trace.json").read_bytes()


def test_run_divergence_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {**GAUSS, "h": 4.1})
    with pytest.warns(RuntimeWarning):
        assert main(["run", str(cfg)]) == 3
    err = json.loads((tmp_path / "out/error.json").read_text())
    assert err["error"] == "divergence"
    assert isinstance(err["iteration"], int) and str(err["iteration"]) in err["message"]


def test_run_correction_infeasible_exit_code(tmp_path):
    cfg = _write(tmp_path, {**GAUSS, "correction": True}, model={"kind": "gaussian", "noise_var": 20.0})
    assert main(["run", str(cfg)]) == 4
    err = json.loads((tmp_path / "out/error.json").read_text())
    assert err["error"] == "correction_infeasible"


@pytest.mark.parametrize("bad", [
    {"extra_key": 1},
    {"sampler": {**GAUSS, "stride": 2}},
    {"sampler": {**GAUSS, "schedule": {"h0": 0.1}}},
    {"sampler": {**GAUSS, "h": -1.0}},
])
def test_config_schema_violations_exit_2(tmp_path, bad):
    cfg = {"seed": 0, "output_dir": "out", "model": {"kind": "gaussian"}, "sampler": GAUSS}
    cfg.update(bad)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["run", str(p)]) == 2
    assert not (tmp_path / "out").exists()


def test_missing_config_file_exit_2(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 2


def test_sweep_single_h_rejected(tmp_path):
    assert main(["sweep", str(_write(tmp_path, GAUSS)), "--h", "0.1"]) == 2


def test_sweep_writes_report(tmp_path):
    cfg = _write(tmp_path, {**GAUSS, "iterations": 2000})
    assert main(["sweep", str(cfg), "--h", "1e-2,1e-1,5"]) == 0
    lines = (tmp_path / "out/sweep.csv").read_text().splitlines()
    assert lines[0] == "h,ksd,min_ess,wall_clock,status"
    assert len(lines) == 4
    rep = json.loads((tmp_path / "out/sweep.json").read_text())
    assert rep["rows"][2]["status"] == "divergence"
    assert rep["argmin_ksd_h"] in (0.01, 0.1)


def test_sweep_rows_independent(tmp_path):
    cfg = ExperimentConfig.model_validate({"seed": 5, "output_dir": "out", "model": {"kind": "gaussian"},
                                           "sampler": {**GAUSS, "iterations": 2000}})
    full = run_sweep(cfg, [1e-3, 1e-2, 1e-1], tmp_path)["rows"]
    part = run_sweep(cfg, [1e-3, 1e-1], tmp_path)["rows"]
    for a, b in ((full[0], part[0]), (full[2], part[1])):
        assert a["ksd"] == b["ksd"] and a["min_ess"] == b["min_ess"]


def test_diagnose_matches_in_run(tmp_path):
    cfg = _write(tmp_path, GAUSS)
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    assert main(["diagnose", str(out / "trace.csv"), "--ksd", "--ess"]) == 0
    a = json.loads((out / "diagnostics.json").read_text())
    b = json.loads((out / "diagnostics-offline.json").read_text())
    assert abs(a["ksd"] - b["ksd"]) <= 1e-12 * abs(a["ksd"])
    assert np.allclose(a["ess_per_dim"], b["ess_per_dim"], rtol=1e-12, atol=0)


def test_diagnose_without_grads(tmp_path):
    p = tmp_path / "t.csv"
    rng = np.random.default_rng(0)
    rows = ["iter,theta_0,theta_1"] + [f"{k + 1},{a!r},{b!r}" for k, (a, b) in
                                        enumerate(rng.normal(size=(200, 2)).tolist())]
    p.write_text("\n".join(rows) + "\n")
    assert main(["diagnose", str(p), "--ess"]) == 0
    rep = json.loads((tmp_path / "diagnostics-offline.json").read_text())
    assert "ksd" not in rep and len(rep["ess_per_dim"]) == 2
    assert main(["diagnose", str(p), "--ksd"]) == 2


def test_diagnose_malformed_csv(tmp_path, capsys):
    p = tmp_path / "t.csv"
    p.write_text("iter,theta_0,grad_0\n1,0.5,0.1\n2,abc,0.2\n")
    assert main(["diagnose", str(p), "--ksd"]) == 2
    err = capsys.readouterr().err
    assert "row" in err and "column" in err


def test_logreg_model_run(tmp_path):
    model = {"kind": "logreg", "n_data": 500, "dim": 3}
    sampler = {"algorithm": "sgld", "estimator": "simple", "batch_size": 50, "h": 1e-3,
               "iterations": 1000, "burn_in": 500}
    assert main(["run", str(_write(tmp_path, sampler, model))]) == 0
    diag = json.loads((tmp_path / "out/diagnostics.json").read_text())
    assert 0 < diag["log_loss"] < math.log(2) + 0.1


@pytest.mark.parametrize("algorithm,extra", [
    ("sgld", {"estimator": "cv", "sgd": {"iterations": 500, "h0": 1e-3, "batch_size": 50}}),
    ("sghmc", {"friction": 10.0, "inner_steps": 2}),
    ("sgnht", {"A": 1.0}),
    ("ula", {"estimator": "full"}),
])
def test_csv_model_runs_every_algorithm(tmp_path, algorithm, extra):
    data, _ = simulate_logreg(400, 2, rng=np.random.default_rng(1))
    data.to_csv(tmp_path / "data.csv")
    model = {"kind": "csv", "path": "data.csv", "label": data.label_name}
    sampler = {"algorithm": algorithm, "estimator": "simple", "batch_size": 40, "h": 1e-3,
               "iterations": 600, "burn_in": 100, **extra}
    assert main(["run", str(_write(tmp_path, sampler, model))]) == 0
    diag = json.loads((tmp_path / "out/diagnostics.json").read_text())
    assert math.isfinite(diag["log_loss"]) and math.isfinite(diag["ksd"])


def test_gaussian_schedule_and_momentum_paths(tmp_path):
    sampler = {"algorithm": "sghmc", "estimator": "full",
               "schedule": {"kind": "polynomial", "h0": 0.05, "gamma": 0.33},
               "iterations": 2000}
    assert main(["run", str(_write(tmp_path, sampler, {"kind": "gaussian", "noise_var": 0.01}))]) == 0


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    from sgmcmc import __version__
    assert __version__ in capsys.readouterr().out


@pytest.mark.parametrize("name", ["gaussian.json", "logreg.json"])
def test_shipped_configs_validate(name):
    from pathlib import Path
    from sgmcmc.cli import load_config
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / name)
    assert cfg.sampler.iterations > cfg.sampler.burn_in
