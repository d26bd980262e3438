#!/usr/bin/env python3
"""
Oracle and property suites run by ``main.py check``.

Every suite returns a CheckResult; ``run_all_checks`` runs them in order.
Sizes default to the full acceptance settings; ``quick=True`` shrinks them
for the unit tests.
"""

import functools
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

import math_dists
import model as vae
from data import PatchBatch, synth_patches
from logger_config import get_logger
from preprocessing import PreprocConfig, preprocess_pipeline, whiten

logger = get_logger("checks")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} ({self.seconds:.2f}s): {self.detail}"


def _check(name: str) -> Callable:
    """Time a suite and turn an unexpected exception into a failed result."""
    def decorate(func: Callable[..., Tuple[bool, str]]) -> Callable[..., CheckResult]:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> CheckResult:
            start = time.perf_counter()
            try:
                passed, detail = func(*args, **kwargs)
            except Exception as e:
                logger.exception(f"Check {name} raised")
                passed, detail = False, f"raised {type(e).__name__}: {e}"
            return CheckResult(name, bool(passed), detail, time.perf_counter() - start)
        return wrapper
    return decorate


def numerical_gradients(
    func: Callable[[Dict[str, np.ndarray]], float],
    tensors: Dict[str, np.ndarray],
    h: float = 1e-5
) -> Dict[str, np.ndarray]:
    """Central finite differences of a scalar function of named tensors."""
    grads = {}
    for name, tensor in tensors.items():
        grad = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            shifted = {k: v.copy() for k, v in tensors.items()}
            shifted[name][idx] = tensor[idx] + h
            f_plus = func(shifted)
            shifted[name][idx] = tensor[idx] - h
            f_minus = func(shifted)
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = grad
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


@_check("kl_oracles")
def check_kl_oracles(n_q: int = 20, n_0: int = 10, n_gaussian: int = 50, seed: int = 0) -> Tuple[bool, str]:
    """Closed-form KLs against series summation (Poisson, 1e-8) and quadrature (Gaussian, 1e-6)."""
    worst_poisson = 0.0
    for lam_q in np.geomspace(0.01, 50.0, n_q):
        for lam_0 in np.geomspace(0.01, 50.0, n_0):
            err = abs(math_dists.kl_poisson(lam_q, lam_0) - math_dists.kl_poisson_series_oracle(lam_q, lam_0))
            worst_poisson = max(worst_poisson, err)

    rng = np.random.default_rng(seed)
    worst_gauss = 0.0
    for _ in range(n_gaussian):
        mu, mu0 = rng.uniform(-3.0, 3.0, size=2)
        var, var0 = rng.uniform(0.1, 4.0, size=2)
        err = abs(math_dists.kl_gaussian(mu, var, mu0, var0)
                  - math_dists.kl_gaussian_quadrature_oracle(mu, var, mu0, var0))
        worst_gauss = max(worst_gauss, err)

    passed = worst_poisson <= 1e-8 and worst_gauss <= 1e-6
    return passed, f"max |err| poisson={worst_poisson:.2e} ({n_q * n_0} points), gaussian={worst_gauss:.2e}"


MOMENT_ATOL = 1e-12


def _excess_deviation(analytic: float, estimate: float, se: float) -> float:
    """
    Deviation in standard errors beyond an absolute slack of MOMENT_ATOL.

    Far below zero every draw of relu(z) is exactly 0 and the standard error
    vanishes; a tiny analytic moment then still counts as a match.
    """
    excess = max(abs(analytic - estimate) - MOMENT_ATOL, 0.0)
    if excess == 0.0:
        return 0.0
    return excess / se if se > 0 else math.inf


@_check("rectified_moments")
def check_rectified_moments(
    n_cases: int = 20,
    n_samples: int = 1_000_000,
    seed: int = 1,
    cases: Optional[Sequence[Tuple[float, float]]] = None
) -> Tuple[bool, str]:
    """Analytic rectified mean/variance within 4 standard errors (plus 1e-12) of Monte Carlo."""
    rng = np.random.default_rng(seed)
    if cases is None:
        cases = [(rng.uniform(-3.0, 3.0), rng.uniform(0.2, 3.0)) for _ in range(n_cases)]
    worst = 0.0
    for mu, sigma in cases:
        moments = math_dists.rectified_moments(mu, sigma)
        m_hat, v_hat, se_m, se_v = math_dists.rectified_moments_mc(mu, sigma, n_samples, rng)
        worst = max(
            worst,
            _excess_deviation(float(moments.m), m_hat, se_m),
            _excess_deviation(float(moments.v), v_hat, se_v),
        )
    return worst <= 4.0, f"worst deviation {worst:.2f} SE over {len(cases)} cases"


def random_gradient_instance(
    family: vae.Family,
    rng: np.random.Generator,
    max_k: int = 4,
    max_m: int = 6
) -> Tuple[vae.ModelParams, np.ndarray, float]:
    """Small random model, batch and beta with priors moved off their initial values."""
    k = int(rng.integers(1, max_k + 1))
    m = int(rng.integers(2, max_m + 1))
    batch = int(rng.integers(2, 6))
    params = vae.init_model(family, k, m, rng)
    tensors = {name: t + 0.3 * rng.standard_normal(t.shape) for name, t in params.tensors().items()}
    x = rng.standard_normal((batch, m))
    return params.with_tensors(tensors), x, float(rng.uniform(0.1, 2.0))


@_check("gradients")
def check_gradients(n_instances: int = 50, h: float = 1e-5, tol: float = 1e-5, seed: int = 2) -> Tuple[bool, str]:
    """Hand-derived gradients against central finite differences, per family."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for family in vae.Family:
        worst[family.value] = 0.0
        for _ in range(n_instances):
            params, x, beta = random_gradient_instance(family, rng)
            analytic = vae.gradients(params, x, beta).tensors
            numeric = numerical_gradients(
                lambda t: vae.free_energy(params.with_tensors(t), x, beta).total, params.tensors(), h
            )
            for name in params.tensor_names:
                worst[family.value] = max(worst[family.value], relative_error(analytic[name], numeric[name]))
    passed = all(err <= tol for err in worst.values())
    detail = ", ".join(f"{fam} max rel err={err:.2e}" for fam, err in worst.items())
    return passed, f"{detail} ({n_instances} instances each)"


@_check("taylor")
def check_taylor(n_grid: int = 61, lambda_0: float = 2.5) -> Tuple[bool, str]:
    """Cubic remainder of the quadratic KL expansions and Poisson KL curvature lambda_0 at u = 0."""
    u = np.linspace(-0.3, 0.3, n_grid)
    f_gap = np.abs(math_dists.f_cost(np.exp(u)) - 0.5 * u ** 2) - np.abs(u) ** 3
    g_gap = np.abs(math_dists.g_cost(np.exp(u)) - 0.5 * u ** 2) - np.abs(u) ** 3

    step = 1e-4
    kl = [math_dists.kl_poisson(lambda_0 * np.exp(s), lambda_0) for s in (-step, 0.0, step)]
    curvature = (kl[0] - 2.0 * kl[1] + kl[2]) / step ** 2
    curvature_err = abs(curvature - lambda_0) / lambda_0

    passed = np.all(f_gap <= 0) and np.all(g_gap <= 0) and curvature_err <= 1e-4
    return passed, (
        f"max remainder excess f={f_gap.max():.2e}, g={g_gap.max():.2e}; "
        f"curvature {curvature:.6f} vs lambda_0 {lambda_0} (rel {curvature_err:.1e})"
    )


@_check("elbo_carving")
def check_elbo_carving(n_models: int = 10, n_samples: int = 100_000, seed: int = 3) -> Tuple[bool, str]:
    """Both ELBO carvings agree within 4 Monte Carlo standard errors on random Gaussian models."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        params = vae.init_model(vae.Family.RECTIFIED_GAUSSIAN, 4, 6, rng)
        params = params.with_tensors({
            "prior_mu": 0.5 * rng.standard_normal(4),
            "prior_log_sigma": 0.3 * rng.standard_normal(4),
        })
        x = rng.standard_normal((4, 6))
        carving = vae.elbo_decomposition_check(params, x, n_samples, rng)
        worst = max(worst, abs(carving.lhs - carving.rhs) / max(carving.mc_se, 1e-300))
    return worst <= 4.0, f"worst |lhs - rhs| = {worst:.2f} SE over {n_models} models"


@_check("preprocessing")
def check_preprocessing(n_patches: int = 10_000, side: int = 16, seed: int = 4) -> Tuple[bool, str]:
    """Constant patches whiten to zero; the pipeline output is column-standardized."""
    cfg = PreprocConfig()
    constant = PatchBatch(np.full((3, side * side), 0.7), side)
    constant_max = float(np.max(np.abs(whiten(constant, cfg).data)))

    patches = synth_patches(n_patches, side=side, seed=seed)
    start = time.perf_counter()
    processed, _ = preprocess_pipeline(patches, cfg)
    elapsed = time.perf_counter() - start
    mean_err = float(np.max(np.abs(processed.data.mean(axis=0))))
    std_err = float(np.max(np.abs(processed.data.std(axis=0) - 1.0)))

    passed = constant_max <= 1e-12 and mean_err <= 1e-6 and std_err <= 1e-6
    return passed, (
        f"constant->|{constant_max:.1e}|, column mean err {mean_err:.1e}, std err {std_err:.1e}, "
        f"pipeline on {n_patches} patches {elapsed:.2f}s"
    )


def _chisquare_poisson(samples: np.ndarray, lam: float) -> float:
    """Chi-square goodness-of-fit p-value with bins pooled until each expects >= 5."""
    n = samples.size
    top = int(samples.max())
    expected = n * stats.poisson.pmf(np.arange(top + 1), lam)
    expected[-1] += n * stats.poisson.sf(top, lam)
    observed = np.bincount(samples, minlength=top + 1).astype(np.float64)

    obs_bins, exp_bins = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= 5.0:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and exp_bins:
        obs_bins[-1] += acc_o
        exp_bins[-1] += acc_e
    if len(exp_bins) < 2:
        return 1.0
    return float(stats.chisquare(obs_bins, exp_bins).pvalue)


SAMPLER_RATES = (0.5, 2.0, 9.5, 10.5, 20.0)
SAMPLER_ALPHA = 1e-3


@_check("samplers")
def check_samplers(n_samples: int = 100_000, seed: int = 5) -> Tuple[bool, str]:
    """Poisson sampler passes chi-square at 1e-3 on both sides of lambda = 10; Gaussian moments within 4 SE."""
    rng = np.random.default_rng(seed)
    p_values = {}
    for lam in SAMPLER_RATES:
        draws = math_dists.sample_poisson(np.full(n_samples, lam), rng)
        p_values[lam] = _chisquare_poisson(draws, lam)

    z = math_dists.sample_gaussian(np.full(n_samples, 1.5), np.full(n_samples, 2.0), rng)
    mean_dev = abs(z.mean() - 1.5) / (2.0 / np.sqrt(n_samples))
    # Var of the sample variance of a normal is 2 sigma^4 / n
    var_dev = abs(z.var() - 4.0) / (4.0 * np.sqrt(2.0 / n_samples))

    passed = min(p_values.values()) > SAMPLER_ALPHA and mean_dev <= 4.0 and var_dev <= 4.0
    detail = ", ".join(f"p(lambda={lam})={p:.3f}" for lam, p in p_values.items())
    return passed, f"{detail}; gaussian mean {mean_dev:.2f} SE, var {var_dev:.2f} SE"


def run_all_checks(quick: bool = False) -> List[CheckResult]:
    """
    Run every suite.

    Parameters
    ----------
    quick : bool
        Shrink sample sizes and instance counts (unit-test scale)

    Returns
    -------
    list
        One CheckResult per suite, in a fixed order
    """
    if quick:
        suites = [
            lambda: check_kl_oracles(n_q=5, n_0=4, n_gaussian=5),
            lambda: check_rectified_moments(n_cases=3, n_samples=200_000),
            lambda: check_gradients(n_instances=3),
            check_taylor,
            lambda: check_elbo_carving(n_models=2, n_samples=10_000),
            lambda: check_preprocessing(n_patches=200),
            lambda: check_samplers(n_samples=20_000),
        ]
    else:
        suites = [
            check_kl_oracles,
            check_rectified_moments,
            check_gradients,
            check_taylor,
            check_elbo_carving,
            check_preprocessing,
            check_samplers,
        ]

    results = []
    for suite in suites:
        result = suite()
        log = logger.info if result.passed else logger.error
        log(result.line())
        results.append(result)
    return results
