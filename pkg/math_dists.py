#!/usr/bin/env python3
"""
Special functions, closed-form divergences, samplers and brute-force oracles
for Poisson, Gaussian and rectified-Gaussian latent variables.

All divergences are accumulated in float64 whatever the storage precision of
the inputs. Functions accept scalars or arrays; vector arguments of a KL must
have identical shapes and the result is the sum over all entries.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import integrate, special, stats

SQRT_2PI = np.sqrt(2.0 * np.pi)
ORACLE_TAIL_MASS = 1e-12


class OracleCutoffError(ValueError):
    """Raised when a truncated series would drop non-negligible Poisson mass."""


@dataclass(frozen=True)
class RectifiedMoments:
    """Mean ``m`` and variance ``v`` of relu(z), z ~ N(mu, sigma^2), with zeta = mu/sigma."""
    m: np.ndarray
    v: np.ndarray
    zeta: np.ndarray


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(**arrays: np.ndarray) -> None:
    shapes = {name: np.shape(arr) for name, arr in arrays.items()}
    if len(set(shapes.values())) > 1:
        detail = ", ".join(f"{name}{shape}" for name, shape in shapes.items())
        raise ValueError(f"length mismatch: {detail}")


def _check_positive(name: str, x: np.ndarray) -> None:
    if np.any(~(x > 0)):
        raise ValueError(f"{name} must be strictly positive")


def _scalar_or_array(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


# ---------------------------------------------------------------------------
# Cost functions
# ---------------------------------------------------------------------------

def f_cost(y):
    """
    Poisson KL nonlinearity f(y) = y log y - y + 1.

    Extended by continuity to f(0) = 1, which matters when trained rates underflow.

    Parameters
    ----------
    y : float or np.ndarray
        Rate residual(s), y >= 0

    Returns
    -------
    float or np.ndarray
        f(y) >= 0, zero exactly at y = 1
    """
    y = _as_float(y)
    if np.any(y < 0) or np.any(np.isnan(y)):
        raise ValueError("f_cost: y must be nonnegative")
    # y log y - (y - 1): y - 1 is exact near 1, so no cancellation against the +1
    value = special.xlogy(y, y) - (y - 1.0)
    return _scalar_or_array(np.maximum(value, 0.0))


def g_cost(y):
    """
    Gaussian KL nonlinearity g(y) = y - 1 - log y.

    Evaluated as d - log1p(d) with d = y - 1 so that values near y = 1 keep
    full relative precision.
    """
    y = _as_float(y)
    if np.any(~(y > 0)):
        raise ValueError("g_cost: y must be strictly positive")
    d = y - 1.0
    return _scalar_or_array(np.maximum(d - np.log1p(d), 0.0))


# ---------------------------------------------------------------------------
# Closed-form KL divergences
# ---------------------------------------------------------------------------

def kl_poisson(rates_q, rates_prior) -> float:
    """
    KL(Pois(lambda_q) || Pois(lambda_0)) summed over latent dimensions.

    Returns sum_i lambda_0i * f(lambda_qi / lambda_0i).
    """
    lam_q = _as_float(rates_q)
    lam_0 = _as_float(rates_prior)
    _check_same_shape(rates_q=lam_q, rates_prior=lam_0)
    _check_positive("rates_q", lam_q)
    _check_positive("rates_prior", lam_0)
    return float(np.sum(lam_0 * f_cost(lam_q / lam_0)))


def kl_gaussian(mu, var, mu0, var0) -> float:
    """
    KL(N(mu, var) || N(mu0, var0)) for diagonal Gaussians.

    Returns 1/2 sum_i [ (mu_i - mu0_i)^2 / var0_i + g(var_i / var0_i) ].
    """
    mu, var, mu0, var0 = (_as_float(a) for a in (mu, var, mu0, var0))
    _check_same_shape(mu=mu, var=var, mu0=mu0, var0=var0)
    _check_positive("var", var)
    _check_positive("var0", var0)
    delta_mu = mu - mu0
    return float(0.5 * np.sum(delta_mu ** 2 / var0 + g_cost(var / var0)))


def kl_poisson_quadratic(log_residual, rates_prior) -> float:
    """Second-order approximation 1/2 sum_i lambda_0i u_i^2, u = log(lambda_q / lambda_0)."""
    u = _as_float(log_residual)
    lam_0 = _as_float(rates_prior)
    _check_same_shape(log_residual=u, rates_prior=lam_0)
    return float(0.5 * np.sum(lam_0 * u ** 2))


def kl_gaussian_quadratic(delta_mu, log_var_residual, var0) -> float:
    """
    Second-order approximation of the Gaussian KL in the log-variance residual.

    Returns sum_i [ 1/2 delta_mu_i^2 / var0_i + 1/4 v_i^2 ], v = log(var / var0).
    """
    dmu, v, var0 = (_as_float(a) for a in (delta_mu, log_var_residual, var0))
    _check_same_shape(delta_mu=dmu, log_var_residual=v, var0=var0)
    return float(np.sum(0.5 * dmu ** 2 / var0 + 0.25 * v ** 2))


def kl_gaussian_quadratic_sigma(delta_mu, log_sigma_residual, var0) -> float:
    """Same approximation written in the log-scale residual: (log delta_sigma)^2 = 1/4 (log delta_sigma^2)^2."""
    dmu, s, var0 = (_as_float(a) for a in (delta_mu, log_sigma_residual, var0))
    _check_same_shape(delta_mu=dmu, log_sigma_residual=s, var0=var0)
    return float(np.sum(0.5 * dmu ** 2 / var0 + s ** 2))


def gaussian_entropy(var) -> float:
    """Differential entropy of a diagonal Gaussian, sum_i 1/2 log(2 pi e var_i)."""
    var = _as_float(var)
    _check_positive("var", var)
    return float(0.5 * np.sum(np.log(2.0 * np.pi * np.e * var)))


# ---------------------------------------------------------------------------
# Standard normal and rectified moments
# ---------------------------------------------------------------------------

def std_normal_pdf(x):
    """phi(x) = exp(-x^2 / 2) / sqrt(2 pi)."""
    x = _as_float(x)
    return _scalar_or_array(np.exp(-0.5 * x * x) / SQRT_2PI)


def std_normal_cdf(x):
    """
    Phi(x) via ``scipy.special.ndtr``.

    ndtr evaluates 1/2 erfc(-x / sqrt 2) with the Cephes rational
    approximations; absolute error is at the level of double roundoff
    (far below 1e-12) over the whole real line.
    """
    x = _as_float(x)
    return _scalar_or_array(special.ndtr(x))


def rectified_moments(mu, sigma) -> RectifiedMoments:
    """
    Mean and variance of h = relu(z) for z ~ N(mu, sigma^2).

    m = mu Phi(zeta) + sigma phi(zeta)
    v = (mu^2 + sigma^2) Phi(zeta) + mu sigma phi(zeta) - m^2,   zeta = mu / sigma

    v is clamped at 0; the expression can land a few ulps below zero.
    """
    mu = _as_float(mu)
    sigma = _as_float(sigma)
    _check_same_shape(mu=mu, sigma=sigma)
    _check_positive("sigma", sigma)

    zeta = mu / sigma
    cdf = special.ndtr(zeta)
    pdf = np.exp(-0.5 * zeta * zeta) / SQRT_2PI
    m = mu * cdf + sigma * pdf
    second = (mu * mu + sigma * sigma) * cdf + mu * sigma * pdf
    v = np.maximum(second - m * m, 0.0)
    return RectifiedMoments(m=m, v=v, zeta=zeta)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def sample_poisson(rates, rng: np.random.Generator) -> np.ndarray:
    """
    Exact Poisson samples.

    ``Generator.poisson`` draws by multiplication of uniforms (inversion) for
    lambda < 10 and by Hormann's PTRS transformed rejection above, and is
    reproducible for a given generator state.
    """
    lam = _as_float(rates)
    if not np.all(np.isfinite(lam)):
        raise ValueError("sample_poisson: rates must be finite")
    _check_positive("rates", lam)
    return rng.poisson(lam)


def sample_gaussian(mu, sigma, rng: np.random.Generator) -> np.ndarray:
    """
    mu + sigma * eps with eps from the Generator's ziggurat standard normal.

    sigma = 0 is allowed and returns mu exactly.
    """
    mu = _as_float(mu)
    sigma = _as_float(sigma)
    if np.any(sigma < 0) or np.any(np.isnan(sigma)):
        raise ValueError("sample_gaussian: sigma must be nonnegative")
    shape = np.broadcast(mu, sigma).shape
    eps = rng.standard_normal(shape)
    return mu + sigma * eps


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def default_series_cutoff(lambda_q: float) -> int:
    """Conservative cutoff lambda_q + 40 sqrt(lambda_q) + 40."""
    return int(np.ceil(lambda_q + 40.0 * np.sqrt(lambda_q) + 40.0))


def kl_poisson_series_oracle(lambda_q: float, lambda_0: float, cutoff: Optional[int] = None) -> float:
    """
    KL between two Poisson laws by direct summation over the support.

    Sums Pois(z; lambda_q) [log Pois(z; lambda_q) - log Pois(z; lambda_0)] for
    z = 0..cutoff from log-pmf differences. Raises OracleCutoffError when the
    Poisson tail beyond ``cutoff`` carries mass >= 1e-12 rather than
    silently truncating.
    """
    if not (lambda_q > 0 and lambda_0 > 0):
        raise ValueError("kl_poisson_series_oracle: rates must be strictly positive")
    if cutoff is None:
        cutoff = default_series_cutoff(lambda_q)
    tail = stats.poisson.sf(cutoff, lambda_q)
    if tail >= ORACLE_TAIL_MASS:
        raise OracleCutoffError(
            f"cutoff {cutoff} leaves tail mass {tail:.3e} for lambda_q={lambda_q}"
        )
    z = np.arange(cutoff + 1)
    log_q = stats.poisson.logpmf(z, lambda_q)
    log_0 = stats.poisson.logpmf(z, lambda_0)
    terms = np.exp(log_q) * (log_q - log_0)
    return float(np.sum(terms))


def kl_gaussian_quadrature_oracle(mu: float, var: float, mu0: float, var0: float) -> float:
    """1-D KL(N(mu, var) || N(mu0, var0)) by adaptive quadrature of q log(q/p)."""
    if not (var > 0 and var0 > 0):
        raise ValueError("kl_gaussian_quadrature_oracle: variances must be strictly positive")
    sd, sd0 = np.sqrt(var), np.sqrt(var0)

    def integrand(z: float) -> float:
        log_q = stats.norm.logpdf(z, mu, sd)
        return np.exp(log_q) * (log_q - stats.norm.logpdf(z, mu0, sd0))

    lo, hi = mu - 14.0 * sd, mu + 14.0 * sd
    value, _ = integrate.quad(integrand, lo, hi, points=[mu], epsabs=1e-12, epsrel=1e-12, limit=200)
    return float(value)


def rectified_moments_mc(
    mu: float,
    sigma: float,
    n: int,
    rng: np.random.Generator,
    chunk: int = 1_000_000
) -> Tuple[float, float, float, float]:
    """
    Monte Carlo estimates of the mean and variance of relu(N(mu, sigma^2)).

    Returns
    -------
    tuple
        (m_hat, v_hat, se_m, se_v)
    """
    samples = []
    remaining = n
    while remaining > 0:
        size = min(chunk, remaining)
        z = sample_gaussian(np.full(size, mu), np.full(size, sigma), rng)
        samples.append(np.maximum(z, 0.0))
        remaining -= size
    h = np.concatenate(samples)
    m_hat = float(h.mean())
    centred = (h - m_hat) ** 2
    v_hat = float(centred.mean())
    se_m = float(h.std(ddof=1) / np.sqrt(n))
    se_v = float(centred.std(ddof=1) / np.sqrt(n))
    return m_hat, v_hat, se_m, se_v
