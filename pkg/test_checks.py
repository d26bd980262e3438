#!/usr/bin/env python3
"""
Unit tests for checks module.
"""

import numpy as np
import pytest

import checks


def test_numerical_gradients_of_quadratic():
    tensors = {"a": np.array([1.0, -2.0]), "b": np.array([[0.5]])}
    grads = checks.numerical_gradients(
        lambda t: float(np.sum(t["a"] ** 2) + 3.0 * t["b"][0, 0]), tensors
    )
    assert np.allclose(grads["a"], [2.0, -4.0], atol=1e-8)
    assert np.allclose(grads["b"], [[3.0]], atol=1e-8)
    assert np.array_equal(tensors["a"], [1.0, -2.0])


def test_relative_error():
    assert checks.relative_error(np.ones(3), np.ones(3)) == 0.0
    assert checks.relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert checks.relative_error(np.array([1.0]), np.array([2.0])) == pytest.approx(0.5)


def test_check_result_line():
    line = checks.CheckResult("gradients", True, "all good", 1.234).line()
    assert line == "PASS gradients (1.23s): all good"
    assert checks.CheckResult("x", False, "bad", 0.0).line().startswith("FAIL x")


def test_check_converts_exceptions():
    """Too few samples for the ELBO carving makes the suite fail instead of raising."""
    result = checks.check_elbo_carving(n_models=1, n_samples=5)
    assert not result.passed
    assert result.detail.startswith("raised ValueError")
    assert result.name == "elbo_carving"


def test_taylor_suite_passes():
    assert checks.check_taylor().passed


def test_kl_oracle_suite_passes():
    result = checks.check_kl_oracles(n_q=4, n_0=3, n_gaussian=5)
    assert result.passed, result.detail


def test_gradient_suite_passes():
    result = checks.check_gradients(n_instances=2)
    assert result.passed, result.detail


def test_preprocessing_suite_passes():
    result = checks.check_preprocessing(n_patches=100, side=8)
    assert result.passed, result.detail


def test_samplers_suite_passes():
    result = checks.check_samplers(n_samples=20_000)
    assert result.passed, result.detail


def test_chisquare_poisson_rejects_wrong_rate():
    rng = np.random.default_rng(0)
    draws = rng.poisson(3.0, size=20_000)
    assert checks._chisquare_poisson(draws, 3.0) > 1e-4
    assert checks._chisquare_poisson(draws, 4.0) < 1e-10


def test_excess_deviation_allows_exact_zero_estimates():
    assert checks._excess_deviation(4e-19, 0.0, 0.0) == 0.0
    assert checks._excess_deviation(1e-3, 0.0, 0.0) == float("inf")
    assert checks._excess_deviation(1.0, 0.9, 0.05) == pytest.approx(2.0)


def test_rectified_moments_far_below_zero():
    """Every draw of relu(z) is 0 for mu = -2.6, sigma = 0.3; the analytic moments still match."""
    result = checks.check_rectified_moments(
        cases=[(-2.6, 0.3), (-2.0, 0.21), (0.5, 1.0)], n_samples=200_000
    )
    assert result.passed, result.detail
    assert "over 3 cases" in result.detail


def test_rectified_moments_suite_passes():
    result = checks.check_rectified_moments(n_cases=6, n_samples=200_000)
    assert result.passed, result.detail


def test_elbo_carving_suite_passes():
    result = checks.check_elbo_carving(n_models=2, n_samples=10_000)
    assert result.passed, result.detail


def test_sampler_rates_and_significance():
    assert {0.5, 2.0, 20.0} <= set(checks.SAMPLER_RATES)
    assert checks.SAMPLER_ALPHA == 1e-3
