import math

import numpy as np
import pytest

from sgmcmc.errors import CorrectionInfeasibleError, NoStationaryDistributionError
from sgmcmc.gaussian import (GaussianTarget, NoiseSpec, ar_simulate, corrected_simulate, diverges,
                             forgetting_rates, gaussian_grad, rotated_variance, stationary_variance,
                             variance_summary)
from sgmcmc.samplers import RunConfig, StepSchedule, run_sgld

from conftest import fd_grad


def test_default_target_geometry():
    t = GaussianTarget()
    P = t.rotation
    assert np.max(np.abs(P.T @ P - np.eye(2))) <= 1e-12
    assert np.allclose(t.cov, t.cov.T)
    assert np.all(np.linalg.eigvalsh(t.cov) > 0)
    assert np.allclose(np.sort(np.linalg.eigvalsh(t.cov)), [1.0, 2.0])


def test_grad_at_mode_is_zero():
    assert np.array_equal(gaussian_grad(GaussianTarget(), np.zeros(2)), np.zeros(2))


def test_grad_matches_hand_computation_and_fd():
    t = GaussianTarget()
    c = s = math.sqrt(0.5)
    P = np.array([[c, s], [-s, c]])
    expect = P.T @ np.diag([0.5, 1.0]) @ P @ np.array([1.0, 0.0])
    g = gaussian_grad(t, np.array([1.0, 0.0]))
    assert np.allclose(g, expect, rtol=1e-14)
    assert np.allclose(g, fd_grad(t.potential, np.array([1.0, 0.0])), rtol=1e-6)


def test_grad_noise_covariance():
    t = GaussianTarget()
    rng = np.random.default_rng(0)
    theta = np.array([0.3, -0.4])
    draws = np.array([gaussian_grad(t, theta, NoiseSpec(0.01), rng) for _ in range(10_000)])
    cov = np.cov((draws - t.precision @ theta).T)
    assert np.allclose(cov, 0.01 * np.eye(2), atol=0.001)


def test_stationary_variance_values():
    closed, pre = stationary_variance(GaussianTarget(), 0.1)
    assert np.allclose(closed, [2.025316, 1.025641], atol=1e-6)
    assert np.allclose(closed, pre, rtol=1e-12)
    closed, pre = stationary_variance(GaussianTarget(), 0.1, 0.01)
    assert np.allclose(closed, [2.027341, 1.026667], atol=1e-6)
    assert np.allclose(closed, pre, rtol=1e-12)


def test_stationary_variance_small_h_limit():
    for h in (1e-3, 1e-4, 1e-5):
        closed, _ = stationary_variance(GaussianTarget(), h)
        assert np.all(np.abs(closed - [2.0, 1.0]) <= h)


def test_stationary_variance_forms_agree_on_grid():
    t = GaussianTarget((3.0, 0.5))
    for h in np.linspace(0.01, 1.9, 20):
        for V in (0.0, 0.1, 2.0):
            closed, pre = stationary_variance(t, h, V)
            assert np.allclose(closed, pre, rtol=1e-12)


def test_no_stationary_distribution_error():
    with pytest.raises(NoStationaryDistributionError):
        stationary_variance(GaussianTarget(), 4.0)


def test_ar_simulate_matches_closed_form_on_grid():
    t = GaussianTarget()
    for h in (0.01, 0.05, 0.1):
        for tau2 in (0.0, 0.01):
            K = 2_000_000
            tr = ar_simulate(t, h, NoiseSpec(tau2), K, rng=np.random.default_rng(7),
                             burn_in=20_000, record_grads=False)
            emp = rotated_variance(tr, t)
            closed, _ = stationary_variance(t, h, tau2)
            a = forgetting_rates(t, h)
            se = closed * np.sqrt(2 * (1 + a * a) / (1 - a * a) / tr.n_samples)
            assert np.all(np.abs(emp - closed) <= 3 * se), (h, tau2, emp, closed)
            u = t.to_rotated(tr.thetas)
            mse = np.sqrt(closed * (1 + a) / (1 - a) / tr.n_samples)
            assert np.all(np.abs(u.mean(axis=0)) <= 3 * mse)


def test_ar_simulate_is_sgld_in_law():
    # same recursion through the generic loop with the equivalent gradient noise (4 tau2)
    from sgmcmc.gaussian import NoisyGaussianEstimator
    t = GaussianTarget()
    cfg = RunConfig(iterations=200_000, burn_in=2_000, schedule=StepSchedule("fixed", 0.1))
    tr = run_sgld(t, cfg, np.random.default_rng(1), estimator=NoisyGaussianEstimator(t, 4 * 0.25))
    emp = rotated_variance(tr, t)
    closed, _ = stationary_variance(t, 0.1, 0.25)
    a = forgetting_rates(t, 0.1)
    se = closed * np.sqrt(2 * (1 + a * a) / (1 - a * a) / tr.n_samples)
    assert np.all(np.abs(emp - closed) <= 3 * se)


def test_ar_simulate_storage_and_grads():
    t = GaussianTarget()
    tr = ar_simulate(t, 0.1, NoiseSpec(0.0), 1000, rng=np.random.default_rng(0), burn_in=100, thin=9)
    assert tr.n_samples == (1000 - 100) // 9
    assert tr.iterations[0] == 109
    assert np.allclose(tr.grads, tr.thetas @ t.precision)


def test_ar_simulate_step_by_step():
    t = GaussianTarget()
    h = 0.1
    tr = ar_simulate(t, h, NoiseSpec(0.04), 5, theta0=np.array([1.0, 2.0]),
                     rng=np.random.default_rng(3))
    # replay: nu_0, then per chunk z block and nu_1..nu_5
    r = np.random.default_rng(3)
    nu = [0.2 * r.standard_normal(2)]
    z = r.standard_normal((5, 2))
    nu += list(0.2 * r.standard_normal((5, 2)))
    theta = np.array([1.0, 2.0])
    for k in range(5):
        theta = theta - (h / 2) * t.precision @ theta + h * nu[k] + math.sqrt(h) * z[k]
        assert np.allclose(tr.thetas[k], theta, rtol=1e-12)
        assert np.allclose(tr.grads[k], t.precision @ theta - 2 * nu[k + 1], rtol=1e-12)


def test_divergence_above_threshold():
    t = GaussianTarget()
    hits = sum(diverges(t, 4.1, 10_000, np.random.default_rng(s)) for s in range(100))
    assert hits >= 95


def test_unstable_step_is_flagged_and_reported():
    t = GaussianTarget()
    with pytest.warns(RuntimeWarning):
        tr = ar_simulate(t, 4.1, NoiseSpec(), 10_000, rng=np.random.default_rng(0))
    assert tr.meta.get("unstable") and tr.divergence is not None
    assert "iteration" in tr.divergence.message


def test_stable_below_threshold():
    t = GaussianTarget()
    h = 0.95 * t.stability_limit
    for s in range(5):
        tr = ar_simulate(t, h, NoiseSpec(), 100_000, rng=np.random.default_rng(s), record_grads=False,
                         burn_in=1000)
        assert tr.ok
        closed, _ = stationary_variance(t, h)
        a = forgetting_rates(t, h)
        se = closed * np.sqrt(2 * (1 + a * a) / (1 - a * a) / tr.n_samples)
        assert np.all(np.abs(rotated_variance(tr, t) - closed) <= 4 * se)


def test_autocorrelation_follows_forgetting_rate():
    from sgmcmc.diagnostics import autocorrelation
    t = GaussianTarget()
    h = 0.1
    tr = ar_simulate(t, h, NoiseSpec(), 2_000_000, rng=np.random.default_rng(0), burn_in=10_000,
                     record_grads=False)
    u = t.to_rotated(tr.thetas)
    a = forgetting_rates(t, h)
    for j in range(2):
        # fit over lags where the true autocorrelation stays above 0.2
        lags = np.arange(1, int(np.log(0.2) / np.log(a[j])) + 1)
        rho = autocorrelation(u[:, j])[lags]
        fitted = np.exp(np.polyfit(lags, np.log(rho), 1)[0])
        assert abs(fitted - a[j]) <= 0.1 * a[j]
        assert np.all(np.abs(rho - a[j] ** lags) <= 0.1 * a[j] ** lags + 0.02)


def test_corrected_removes_inflation():
    t = GaussianTarget()
    tr = corrected_simulate(t, 0.1, NoiseSpec(0.01), 2_000_000, rng=np.random.default_rng(2),
                            burn_in=20_000, record_grads=False)
    closed, _ = stationary_variance(t, 0.1)
    assert np.all(np.abs(rotated_variance(tr, t) / closed - 1) <= 0.01)


def test_corrected_with_zero_noise_is_plain_simulation():
    t = GaussianTarget()
    a = corrected_simulate(t, 0.1, NoiseSpec(0.0), 1000, rng=np.random.default_rng(4))
    b = ar_simulate(t, 0.1, NoiseSpec(0.0), 1000, rng=np.random.default_rng(4))
    assert np.array_equal(a.thetas, b.thetas)


def test_corrected_infeasible():
    with pytest.raises(CorrectionInfeasibleError):
        corrected_simulate(GaussianTarget(), 0.1, NoiseSpec(20.0), 10, rng=np.random.default_rng(0))


def test_variance_summary_fields():
    t = GaussianTarget()
    tr = ar_simulate(t, 0.1, NoiseSpec(0.01), 10_000, rng=np.random.default_rng(0))
    s = variance_summary(t, 0.1, NoiseSpec(0.01), tr)
    assert set(s) == {"h", "tau2", "empirical_var", "closed_form_var", "abs_rel_err"}


def test_target_validation():
    with pytest.raises(ValueError):
        GaussianTarget((1.0, 2.0))
    with pytest.raises(ValueError):
        GaussianTarget((2.0, -1.0))
    with pytest.raises(ValueError):
        GaussianTarget((2.0, 1.0), rotation=np.array([[1.0, 1.0], [0.0, 1.0]]))
