import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmcmc.diagnostics import (DiagnosticsReport, KsdConfig, ScoredSample, ess, imq_kernel_terms,
                                ksd, ksd_naive, ksd_per_dim_sums, log_loss_binary,
                                log_loss_multiclass, min_ess, rmse, stein_kernel)


def _k(x, y, c=1.0, beta=-0.5):
    return (c * c + np.sum((np.asarray(x) - np.asarray(y)) ** 2)) ** beta


def test_kernel_at_coincident_points():
    k, dx, dy, d2 = imq_kernel_terms(np.zeros(3), np.zeros(3))
    assert k == 1.0
    assert np.array_equal(dx, np.zeros(3)) and np.array_equal(dy, np.zeros(3))
    assert np.allclose(d2, 1.0)


def test_kernel_value_unit_offset():
    k, *_ = imq_kernel_terms(np.array([1.0, 0.0]), np.zeros(2))
    assert math.isclose(k, 2 ** -0.5, rel_tol=1e-15)


def test_kernel_terms_match_finite_differences(rng):
    eps = 1e-5
    for _ in range(50):
        c = rng.uniform(0.5, 2.0)
        beta = rng.uniform(-0.9, -0.1)
        x, y = rng.normal(size=3), rng.normal(size=3)
        k, dx, dy, d2 = imq_kernel_terms(x, y, c, beta)
        assert math.isclose(k, _k(x, y, c, beta), rel_tol=1e-14)
        for j in range(3):
            e = np.zeros(3)
            e[j] = eps
            fdx = (_k(x + e, y, c, beta) - _k(x - e, y, c, beta)) / (2 * eps)
            fdy = (_k(x, y + e, c, beta) - _k(x, y - e, c, beta)) / (2 * eps)
            fd2 = (_k(x + e, y + e, c, beta) - _k(x + e, y - e, c, beta)
                   - _k(x - e, y + e, c, beta) + _k(x - e, y - e, c, beta)) / (4 * eps * eps)
            assert abs(dx[j] - fdx) <= 1e-6
            assert abs(dy[j] - fdy) <= 1e-6
            assert abs(d2[j] - fd2) <= 1e-6


@pytest.mark.parametrize("c,beta", [(0.0, -0.5), (-1.0, -0.5), (1.0, 0.0), (1.0, -1.0), (1.0, 0.5)])
def test_kernel_parameter_constraints(c, beta):
    with pytest.raises(ValueError):
        imq_kernel_terms(np.zeros(1), np.zeros(1), c, beta)


def test_stein_kernel_at_mode_is_one():
    assert stein_kernel(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0) == 1.0


def test_stein_kernel_symmetric(rng):
    for _ in range(50):
        x, y, sx, sy = (rng.normal(size=2) for _ in range(4))
        for j in range(2):
            assert abs(stein_kernel(x, y, sx, sy, j) - stein_kernel(y, x, sy, sx, j)) <= 1e-12


def test_stein_kernel_zero_mean_under_standard_normal():
    rng = np.random.default_rng(0)
    n = 10_000
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    vals = np.array([stein_kernel(x[i:i + 1], y[i:i + 1], -x[i:i + 1], -y[i:i + 1], 0)
                     for i in range(n)])
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / math.sqrt(n)


def test_literal_sign_convention_flips_cross_terms(rng):
    x, y, sx, sy = (rng.normal(size=2) for _ in range(4))
    k, dx, dy, d2 = imq_kernel_terms(x, y)
    lit = KsdConfig(score_convention="gradient")
    # with the flag, the supplied vectors are treated as grad U = -score
    expect = sx[0] * sy[0] * k - sx[0] * dy[0] - sy[0] * dx[0] + d2[0]
    assert math.isclose(stein_kernel(x, y, sx, sy, 0, lit), expect, rel_tol=1e-12)


def test_ksd_single_point_at_mode():
    assert ksd(ScoredSample(np.zeros((1, 1)), np.zeros((1, 1)))) == 1.0
    assert ksd_naive(ScoredSample(np.zeros((1, 1)), np.zeros((1, 1)))) == 1.0


def test_ksd_optimized_matches_naive(rng):
    X = rng.normal(size=(500, 3))
    S = -X + 0.1 * rng.normal(size=(500, 3))
    s = ScoredSample(X, S)
    a, b = ksd(s, tile=64), ksd_naive(s)
    assert abs(a - b) <= 1e-10 * abs(b)


def test_ksd_independent_of_worker_count(rng):
    X = rng.normal(size=(300, 2))
    s = ScoredSample(X, -X)
    a = ksd_per_dim_sums(s, tile=50, workers=1)
    b = ksd_per_dim_sums(s, tile=50, workers=4)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(1, 40), d=st.integers(1, 4))
def test_ksd_permutation_invariant_and_matches_naive(seed, K, d):
    r = np.random.default_rng(seed)
    X = r.normal(size=(K, d))
    S = r.normal(size=(K, d))
    base = ksd(ScoredSample(X, S), tile=7)
    p = r.permutation(K)
    assert math.isclose(ksd(ScoredSample(X[p], S[p]), tile=7), base, rel_tol=1e-10)
    assert math.isclose(ksd_naive(ScoredSample(X, S)), base, rel_tol=1e-10)


def test_ksd_detects_convergence():
    small, large = [], []
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.standard_normal((100, 1))
        small.append(ksd(ScoredSample(x, -x)))
        y = r.standard_normal((10_000, 1))
        large.append(ksd(ScoredSample(y, -y), tile=2048))
    assert np.median(large) < np.median(small)


def test_ksd_empty_rejected():
    with pytest.raises(ValueError):
        ksd(ScoredSample(np.empty((0, 2)), np.empty((0, 2))))


def test_scored_sample_validation():
    with pytest.raises(ValueError):
        ScoredSample(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ScoredSample(np.array([[np.nan]]), np.zeros((1, 1)))


def test_ess_iid_near_length():
    ratios = [ess(np.random.default_rng(s).standard_normal(10_000)) / 10_000 for s in range(20)]
    assert all(0.8 <= r <= 1.2 for r in ratios)


def test_ess_ar1_half():
    from scipy.signal import lfilter
    z = np.random.default_rng(1).standard_normal(100_000)
    x = lfilter([1.0], [1.0, -0.5], z)
    r = ess(x) / x.size
    assert abs(r - 1 / 3) <= 0.2 / 3


def test_ess_constant_warns_and_is_zero():
    with pytest.warns(RuntimeWarning):
        assert ess(np.ones(50)) == 0.0


def test_ess_short_sequence_rejected():
    with pytest.raises(ValueError):
        ess(np.arange(5.0))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), phi=st.floats(-0.5, 0.95))
def test_ess_tracks_ar1_value(seed, phi):
    # AR(1) has ESS = n (1 - phi) / (1 + phi); antithetic chains exceed n
    from scipy.signal import lfilter
    n = 20_000
    z = np.random.default_rng(seed).standard_normal(n)
    x = lfilter([1.0], [1.0, -phi], z)
    ratio = ess(x) / (n * (1 - phi) / (1 + phi))
    assert 0.5 <= ratio <= 1.5


def test_min_ess_is_minimum_over_dimensions(rng):
    from scipy.signal import lfilter
    X = np.column_stack([rng.standard_normal(5000), lfilter([1.0], [1.0, -0.9], rng.standard_normal(5000))])
    assert min_ess(X) == min(ess(X[:, 0]), ess(X[:, 1]))


def test_log_loss_binary_perfect_prediction():
    theta = np.array([[1e6]])
    assert log_loss_binary(theta, np.array([[1.0]]), np.array([1])) <= 1e-11


def test_log_loss_binary_half():
    X = np.random.default_rng(0).normal(size=(20, 3))
    y = np.random.default_rng(1).integers(0, 2, 20)
    assert math.isclose(log_loss_binary(np.zeros((4, 3)), X, y), math.log(2), rel_tol=1e-15)


def test_log_loss_binary_matches_direct_oracle(rng):
    thetas = rng.normal(size=(30, 4))
    X = rng.normal(size=(100, 4))
    y = rng.integers(0, 2, 100)
    p = np.zeros(100)
    for i in range(100):
        p[i] = sum(1 / (1 + math.exp(-float(t @ X[i]))) for t in thetas) / len(thetas)
    p = np.clip(p, 1e-12, 1 - 1e-12)
    ref = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for yi, pi in zip(y, p)) / 100
    assert abs(log_loss_binary(thetas, X, y) - ref) <= 1e-12


def test_log_loss_binary_empty():
    with pytest.raises(ValueError):
        log_loss_binary(np.zeros((1, 2)), np.empty((0, 2)), np.empty(0))


def test_log_loss_multiclass_examples():
    assert log_loss_multiclass(np.array([[0.0, 1.0, 0.0]]), np.array([1])) == 0.0
    P = np.full((5, 10), 0.1)
    assert math.isclose(log_loss_multiclass(P, np.arange(5)), math.log(10), rel_tol=1e-12)


def test_log_loss_multiclass_reduces_to_binary(rng):
    from sgmcmc.diagnostics import log_loss_from_probs
    for _ in range(50):
        p = rng.uniform(0.01, 0.99, size=7)
        y = rng.integers(0, 2, 7)
        P = np.column_stack([1 - p, p])
        assert abs(log_loss_multiclass(P, y) - log_loss_from_probs(p, y)) <= 1e-12


def test_log_loss_multiclass_row_sum_check():
    with pytest.raises(ValueError):
        log_loss_multiclass(np.array([[0.5, 0.6]]), np.array([0]))


def test_rmse_examples(rng):
    v = rng.normal(size=10)
    assert rmse(v, v) == 0.0
    assert math.isclose(rmse([0, 0], [3, 4]), math.sqrt(12.5))
    p = rng.permutation(10)
    w = rng.normal(size=10)
    assert math.isclose(rmse(v[p], w[p]), rmse(v, w), rel_tol=1e-14)
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


def test_report_omits_missing_fields():
    rep = DiagnosticsReport(ksd=0.5, ess_per_dim=[10.0], min_ess=10.0)
    d = rep.to_dict()
    assert "log_loss" not in d and "rmse" not in d and d["ksd"] == 0.5
