import numpy as np
import pytest
from numpy.testing import assert_allclose

from analysis import (LAGS, covariance_spectrum, loglog_slope, moment_closed_form, moment_monte_carlo,
                      participation_ratio, scaling_bench, stationary_covariance, tau_scaling_check)
from numerics import Rng
from utils.errors import CapacityError, NumericError, ValidationError


def test_identical_columns_give_full_collapse():
    h = np.tile([[1.0], [2.0], [-1.0]], (1, 10))
    report = covariance_spectrum(h)
    assert report.participation_ratio == pytest.approx(1.0)
    assert report.count_90 == 1


def test_cycling_basis_gives_full_dimension():
    report = covariance_spectrum(np.eye(5))
    assert report.participation_ratio == pytest.approx(5.0)
    assert_allclose(report.eigenvalues, 0.2)


def test_two_point_example():
    report = covariance_spectrum(np.array([[1.0, 1.0], [1.0, -1.0]]))
    assert_allclose(report.eigenvalues, [1.0, 1.0])
    assert report.participation_ratio == pytest.approx(2.0)
    assert report.pca_coords.shape == (2, 2)
    assert list(report.to_dataframe().columns) == ["rank", "eigenvalue"]


def test_participation_ratio_bounds(rng):
    report = covariance_spectrum(rng.normal((6, 40)), method="jacobi")
    assert 1.0 <= report.participation_ratio <= 6.0
    assert np.all(report.eigenvalues >= -1e-10)
    with pytest.raises(NumericError):
        participation_ratio([0.0, 0.0])
    with pytest.raises(ValidationError):
        covariance_spectrum(np.ones((3, 1)))


def test_scalar_moment_examples():
    report = moment_closed_form([[0.0]], [[1.0]])
    assert_allclose(report.as_stated[(0, 0, 0)], [3.0])
    assert_allclose(report.as_stated[(0, 1, 1)], [0.0])
    assert_allclose(report.as_stated[(1, 2, 2)], [0.0])

    report = moment_closed_form([[0.5]], [[1.0]])
    assert_allclose(report.as_stated[(0, 0, 0)], [3.2])
    assert_allclose(report.as_stated[(0, 1, 1)], [0.8])
    assert_allclose(report.as_stated[(1, 2, 2)], [0.4])
    p = 1.0 / (1.0 - 0.25)
    assert_allclose(report.exact[(0, 0, 0)], [3.0 * p * p])
    assert_allclose(report.exact[(0, 1, 1)], [0.25 * 3.0 * p * p + p])


def test_fourth_moment_is_permutation_symmetric(rng):
    u = np.diag([0.4, -0.3])
    a = rng.normal((2, 2))
    sigma = a @ a.T + 0.5 * np.eye(2)
    report = moment_closed_form(u, sigma)
    for tensor in (report.as_stated[(0, 0, 0)], report.exact[(0, 0, 0)]):
        t = tensor.reshape(2, 2, 2, 2)
        for perm in ((1, 0, 2, 3), (2, 1, 0, 3), (3, 1, 2, 0), (0, 2, 1, 3)):
            assert_allclose(t, t.transpose(perm), rtol=1e-12, atol=1e-12)


def test_stationary_covariance_solves_lyapunov():
    u = np.diag([0.5, 0.2])
    sigma = np.array([[1.0, 0.3], [0.3, 2.0]])
    p = stationary_covariance(u, sigma)
    assert_allclose(p, u @ p @ u.T + sigma)


def test_moment_guards():
    with pytest.raises(CapacityError):
        moment_closed_form(0.1 * np.eye(5), np.eye(5))
    with pytest.raises(ValidationError):
        moment_closed_form([[1.0]], [[1.0]])
    with pytest.raises(ValidationError):
        moment_monte_carlo([[0.5]], [[1.0]], samples=100)


def test_monte_carlo_gaussian_fourth_moment():
    mc = moment_monte_carlo([[0.0]], [[1.0]], samples=40_000, burn_in=10, seed=1)
    mean = mc.mc_mean[(0, 0, 0)][0]
    err = mc.mc_stderr[(0, 0, 0)][0]
    assert abs(mean - 3.0) < 4.0 * err
    assert 0.0 < err < 0.1


def test_monte_carlo_matches_closed_form():
    report = moment_closed_form([[0.5]], [[1.0]])
    mc = moment_monte_carlo([[0.5]], [[1.0]], samples=40_000, burn_in=100, seed=2)
    report.mc_mean, report.mc_stderr = mc.mc_mean, mc.mc_stderr
    z = report.z_scores("exact")
    assert set(z) == set(LAGS)
    assert max(float(np.max(np.abs(v))) for v in z.values()) < 4.0
    df = report.to_dataframe()
    assert len(df) == 3
    assert {"as_stated", "exact", "mc_mean", "mc_stderr"} <= set(df.columns)


def test_standard_error_shrinks_with_samples():
    small = moment_monte_carlo([[0.3]], [[1.0]], samples=40_000, seed=5)
    large = moment_monte_carlo([[0.3]], [[1.0]], samples=80_000, seed=5)
    ratio = large.mc_stderr[(0, 1, 1)][0] / small.mc_stderr[(0, 1, 1)][0]
    assert 0.5 < ratio < 0.9


def test_tau_scaling_slopes():
    result = tau_scaling_check([[1.0]], [0.1, 0.2, 0.3, 0.4, 0.5])
    assert 1.9 <= result["slope_011"] <= 2.15
    assert 2.9 <= result["slope_122"] <= 3.15
    scaled = tau_scaling_check([[3.0]], [0.1, 0.2, 0.3, 0.4, 0.5])
    assert scaled["slope_011"] == pytest.approx(result["slope_011"])
    assert_allclose(scaled["norms"]["norm_000"], 9.0 * result["norms"]["norm_000"])


def test_tau_scaling_rejects_bad_grid():
    with pytest.raises(ValidationError):
        tau_scaling_check([[1.0]], [0.3])
    with pytest.raises(ValidationError):
        tau_scaling_check([[1.0]], [0.2, 0.4, 0.6, 0.8])


def test_loglog_slope_of_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_slope(x, 5.0 * x ** 2) == pytest.approx(2.0)


def test_bench_memory_ratios():
    rfp, _ = scaling_bench([4, 8], T=3, mode="rfp", repeats=1)
    memory = dict(zip(rfp["n"], rfp["state_memory_reals"]))
    assert memory[8] == 4 * memory[4]
    rtrl, _ = scaling_bench([4, 8], T=3, mode="full_rtrl", repeats=1)
    memory = dict(zip(rtrl["n"], rtrl["state_memory_reals"]))
    assert memory[8] == 8 * memory[4]
    bptt, _ = scaling_bench([4], T=3, mode="bptt", repeats=1, use_float32=True)
    assert list(bptt.columns) == ["mode", "n", "T", "wall_ms_per_step", "state_memory_reals"]


def test_bench_guards():
    with pytest.raises(CapacityError):
        scaling_bench([65], T=2, mode="full_rtrl", repeats=1)
    with pytest.raises(ValidationError):
        scaling_bench([4], T=2, mode="adjoint")
