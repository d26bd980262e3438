#!/usr/bin/env python3
"""
Linear Poisson VAE (pvae) and rectified-Gaussian VAE (grelu).

Both families share a bias-free linear encoder that emits residuals relative to
a learnable prior and a bias-free linear decoder (the dictionary Phi, M x K).
Training uses the fully closed-form free energy

    F = ||x - Phi m||^2 + diag(Phi^T Phi)^T v + beta * KL(q || p)

where (m, v) are the mean and variance of the decoder input h (h = z for
Poisson, h = relu(z) for Gaussian). All terms are batch means. ``gradients``
differentiates F exactly by hand.
"""

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy import stats

import math_dists
from data import PatchBatch, as_matrix
from utils import (
    FileFormatError,
    TruncatedFileError,
    read_checksummed,
    verify_crc,
    write_checksummed,
)

# Floor for rates and scales inside loss evaluation
POSITIVE_FLOOR = 1e-8

# log p(x|z) normalizer for a Gaussian likelihood with 2 sigma_dec^2 = 1
_HALF_LOG_PI = 0.5 * np.log(np.pi)

Batch = Union[PatchBatch, np.ndarray]


class Family(str, Enum):
    POISSON = "pvae"
    RECTIFIED_GAUSSIAN = "grelu"


POISSON_TENSORS = ("enc_weights", "dictionary", "prior_log_rates")
GAUSSIAN_TENSORS = ("enc_weights", "dictionary", "prior_mu", "prior_log_sigma")


@dataclass
class ModelParams:
    """
    Encoder weights, dictionary and learnable prior for one model.

    Poisson models carry ``prior_log_rates`` (log lambda_0); Gaussian models
    carry ``prior_mu`` and ``prior_log_sigma``. Gaussian encoders stack the
    mean head (rows 0..K-1) over the log-scale head (rows K..2K-1).
    """
    family: Family
    enc_weights: np.ndarray
    dictionary: np.ndarray
    prior_log_rates: Optional[np.ndarray] = None
    prior_mu: Optional[np.ndarray] = None
    prior_log_sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        self.family = Family(self.family)
        for name in self.tensor_names:
            value = getattr(self, name)
            if value is None:
                raise ValueError(f"{self.family.value} model requires '{name}'")
            setattr(self, name, np.asarray(value, dtype=np.float64))
        for name in set(POISSON_TENSORS + GAUSSIAN_TENSORS) - set(self.tensor_names):
            if getattr(self, name) is not None:
                raise ValueError(f"{self.family.value} model does not use '{name}'")

        m_pixels, k = self.dictionary.shape
        heads = 1 if self.family is Family.POISSON else 2
        if self.enc_weights.shape != (heads * k, m_pixels):
            raise ValueError(
                f"enc_weights shape {self.enc_weights.shape} != {(heads * k, m_pixels)}"
            )
        for name in self.tensor_names[2:]:
            if getattr(self, name).shape != (k,):
                raise ValueError(f"{name} must have shape ({k},)")

    @property
    def tensor_names(self) -> Tuple[str, ...]:
        return POISSON_TENSORS if self.family is Family.POISSON else GAUSSIAN_TENSORS

    @property
    def n_latents(self) -> int:
        return self.dictionary.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.dictionary.shape[0]

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.tensor_names}

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> "ModelParams":
        return replace(self, **tensors)

    def copy(self) -> "ModelParams":
        return self.with_tensors({k: v.copy() for k, v in self.tensors().items()})


@dataclass
class PosteriorParams:
    """
    Per-sample posterior parameters (B x K arrays) and their residuals.

    Poisson: ``log_residual`` u and ``rates`` = lambda_0 * exp(u).
    Gaussian: ``delta_mu``, ``log_scale_residual`` dv, ``mu`` = mu_0 + delta_mu
    and ``sigma`` = sigma_0 * exp(dv).
    """
    family: Family
    log_residual: Optional[np.ndarray] = None
    rates: Optional[np.ndarray] = None
    delta_mu: Optional[np.ndarray] = None
    log_scale_residual: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None

    @property
    def log_var_residual(self) -> Optional[np.ndarray]:
        """log(sigma^2 / sigma_0^2) = 2 dv."""
        if self.log_scale_residual is None:
            return None
        return 2.0 * self.log_scale_residual


@dataclass(frozen=True)
class FreeEnergyBreakdown:
    mean_penalty: float
    variance_penalty: float
    kl: float
    beta: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total", self.mean_penalty + self.variance_penalty + self.beta * self.kl
        )

    def components(self) -> Dict[str, float]:
        return {
            "recon_mean": self.mean_penalty,
            "recon_var": self.variance_penalty,
            "kl": self.kl,
            "total": self.total,
        }


@dataclass
class GradientSet:
    """Gradients keyed by ModelParams tensor name, plus their global L2 norm."""
    tensors: Dict[str, np.ndarray]
    global_norm: float

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "GradientSet":
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in tensors.values())))
        return cls(tensors=tensors, global_norm=norm)

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet.from_tensors({k: g * factor for k, g in self.tensors.items()})


class ElboCarving(NamedTuple):
    lhs: float
    rhs: float
    mc_se: float


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def init_model(family: Union[Family, str], k: int, m: int, rng: np.random.Generator) -> ModelParams:
    """
    Fresh parameters.

    Encoder and dictionary entries ~ N(0, 1/M), dictionary columns then scaled
    to unit norm. Poisson log lambda_0 ~ U(-1, 1) (uniform in log-space);
    Gaussian prior starts at the standard normal.
    """
    family = Family(family)
    if k <= 0 or m <= 0:
        raise ValueError(f"k and m must be positive, got k={k}, m={m}")
    scale = 1.0 / np.sqrt(m)
    heads = 1 if family is Family.POISSON else 2
    enc = rng.normal(0.0, scale, size=(heads * k, m))
    dictionary = rng.normal(0.0, scale, size=(m, k))
    dictionary /= np.maximum(np.linalg.norm(dictionary, axis=0, keepdims=True), POSITIVE_FLOOR)

    if family is Family.POISSON:
        return ModelParams(family, enc, dictionary, prior_log_rates=rng.uniform(-1.0, 1.0, size=k))
    return ModelParams(family, enc, dictionary, prior_mu=np.zeros(k), prior_log_sigma=np.zeros(k))


# ---------------------------------------------------------------------------
# Inference and moments
# ---------------------------------------------------------------------------

def _checked_input(params: ModelParams, batch: Batch) -> np.ndarray:
    x = as_matrix(batch)
    if x.shape[1] != params.n_pixels:
        raise ValueError(f"batch width {x.shape[1]} does not match model M={params.n_pixels}")
    return x


def encode(params: ModelParams, batch: Batch) -> PosteriorParams:
    """Residual posterior parameterization: multiplicative gain (Poisson) or shift/scale (Gaussian)."""
    x = _checked_input(params, batch)
    out = x @ params.enc_weights.T
    if params.family is Family.POISSON:
        return PosteriorParams(
            family=params.family,
            log_residual=out,
            rates=np.exp(params.prior_log_rates + out),
        )
    k = params.n_latents
    delta_mu, dv = out[:, :k], out[:, k:]
    return PosteriorParams(
        family=params.family,
        delta_mu=delta_mu,
        log_scale_residual=dv,
        mu=params.prior_mu + delta_mu,
        sigma=np.exp(params.prior_log_sigma + dv),
    )


def decoder_input_moments(post: PosteriorParams) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the decoder input h under q: (lambda, lambda) or rectified moments."""
    if post.family is Family.POISSON:
        return post.rates, post.rates
    moments = math_dists.rectified_moments(post.mu, post.sigma)
    return moments.m, moments.v


def recon_loss_diagonal(
    x: Batch,
    m: np.ndarray,
    v: np.ndarray,
    dictionary: np.ndarray
) -> Tuple[float, float]:
    """
    Closed-form E_q ||x - Phi h||^2 for a factorized posterior.

    Returns
    -------
    tuple
        (mean_penalty, variance_penalty), each averaged over the batch
    """
    x = as_matrix(x)
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    dictionary = np.asarray(dictionary, dtype=np.float64)
    if m.shape != v.shape or m.shape[0] != x.shape[0] or dictionary.shape != (x.shape[1], m.shape[1]):
        raise ValueError(
            f"dimension mismatch: x{x.shape}, m{m.shape}, v{v.shape}, dictionary{dictionary.shape}"
        )
    batch = x.shape[0]
    residual = x - m @ dictionary.T
    col_norms = np.sum(dictionary * dictionary, axis=0)
    return float(np.sum(residual * residual) / batch), float(np.sum(v @ col_norms) / batch)


def recon_loss_trace(x: Batch, m: np.ndarray, full_cov: np.ndarray, dictionary: np.ndarray) -> float:
    """
    ||x - Phi m||^2 + Tr(Phi^T Phi Cov) for a general posterior covariance.

    ``full_cov`` is K x K (shared) or B x K x K; the result is a batch mean.
    """
    x = as_matrix(x)
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    cov = np.asarray(full_cov, dtype=np.float64)
    dictionary = np.asarray(dictionary, dtype=np.float64)
    k = dictionary.shape[1]
    if cov.ndim == 2:
        cov = np.broadcast_to(cov, (x.shape[0], k, k))
    if cov.shape != (x.shape[0], k, k) or m.shape != (x.shape[0], k) or dictionary.shape[0] != x.shape[1]:
        raise ValueError(
            f"dimension mismatch: x{x.shape}, m{m.shape}, cov{cov.shape}, dictionary{dictionary.shape}"
        )
    tol = 1e-12 * max(1.0, float(np.max(np.abs(cov))) if cov.size else 1.0)
    if np.any(np.abs(cov - np.swapaxes(cov, 1, 2)) > tol):
        raise ValueError("full_cov must be symmetric")

    gram = dictionary.T @ dictionary
    residual = x - m @ dictionary.T
    trace = np.einsum("kl,bkl->b", gram, cov)
    return float(np.mean(np.sum(residual * residual, axis=1) + trace))


def reconstruct(params: ModelParams, h: np.ndarray) -> np.ndarray:
    """Linear decoder x_hat = Phi h."""
    return np.asarray(h, dtype=np.float64) @ params.dictionary.T


# ---------------------------------------------------------------------------
# Objective and gradients
# ---------------------------------------------------------------------------

@dataclass
class _Forward:
    x: np.ndarray
    post: PosteriorParams
    m: np.ndarray
    v: np.ndarray
    breakdown: FreeEnergyBreakdown
    # Gaussian only
    sigma: Optional[np.ndarray] = None
    cdf: Optional[np.ndarray] = None
    pdf: Optional[np.ndarray] = None


def _forward(params: ModelParams, batch: Batch, beta: float) -> _Forward:
    if not beta >= 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    x = _checked_input(params, batch)
    post = encode(params, x)
    n = x.shape[0]

    if params.family is Family.POISSON:
        rates = np.maximum(post.rates, POSITIVE_FLOOR)
        m = v = rates
        prior = np.broadcast_to(np.exp(params.prior_log_rates), rates.shape)
        kl = math_dists.kl_poisson(rates, prior) / n
        extra = {}
    else:
        sigma = np.maximum(post.sigma, POSITIVE_FLOOR)
        moments = math_dists.rectified_moments(post.mu, sigma)
        m, v = moments.m, moments.v
        shape = post.mu.shape
        kl = math_dists.kl_gaussian(
            post.mu,
            sigma ** 2,
            np.broadcast_to(params.prior_mu, shape),
            np.broadcast_to(np.exp(2.0 * params.prior_log_sigma), shape),
        ) / n
        extra = {
            "sigma": sigma,
            "cdf": math_dists.std_normal_cdf(moments.zeta),
            "pdf": math_dists.std_normal_pdf(moments.zeta),
        }

    mean_penalty, variance_penalty = recon_loss_diagonal(x, m, v, params.dictionary)
    breakdown = FreeEnergyBreakdown(mean_penalty, variance_penalty, kl, float(beta))
    return _Forward(x=x, post=post, m=m, v=v, breakdown=breakdown, **extra)


def free_energy(params: ModelParams, batch: Batch, beta: float) -> FreeEnergyBreakdown:
    """Batch-averaged closed-form free energy and its components."""
    return _forward(params, batch, beta).breakdown


def recon_gradients(
    x: Batch,
    m: np.ndarray,
    v: np.ndarray,
    dictionary: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of mean_penalty + variance_penalty (batch means).

    Returns
    -------
    tuple
        (d/dm [B x K], d/dv [B x K], d/dPhi [M x K])
    """
    x = as_matrix(x)
    n = x.shape[0]
    residual = x - m @ dictionary.T
    col_norms = np.sum(dictionary * dictionary, axis=0)
    grad_m = -(2.0 / n) * residual @ dictionary
    grad_v = np.broadcast_to(col_norms / n, m.shape).copy()
    grad_dict = -(2.0 / n) * residual.T @ m + (2.0 / n) * dictionary * np.sum(v, axis=0)
    return grad_m, grad_v, grad_dict


def free_energy_and_gradients(
    params: ModelParams,
    batch: Batch,
    beta: float
) -> Tuple[FreeEnergyBreakdown, GradientSet]:
    """
    Free energy and its exact gradient from a single forward pass.

    Floors on rates/scales are passed straight through.
    """
    fwd = _forward(params, batch, beta)
    x, post = fwd.x, fwd.post
    n = x.shape[0]
    grad_m, grad_v, grad_dict = recon_gradients(x, fwd.m, fwd.v, params.dictionary)

    if params.family is Family.POISSON:
        rates, u = fwd.m, post.log_residual
        prior_rates = np.exp(params.prior_log_rates)
        # m = v = lambda and d lambda / d log lambda = lambda
        grad_log_rate = (grad_m + grad_v) * rates
        # KL = sum lambda u - lambda + lambda_0; d/du = lambda u
        grad_u = grad_log_rate + (beta / n) * rates * u
        kl_terms = rates * u - rates + prior_rates
        grads = GradientSet.from_tensors({
            "enc_weights": grad_u.T @ x,
            "dictionary": grad_dict,
            "prior_log_rates": np.sum(grad_log_rate, axis=0) + (beta / n) * np.sum(kl_terms, axis=0),
        })
        return fwd.breakdown, grads

    mu, sigma = post.mu, fwd.sigma
    cdf, pdf, m = fwd.cdf, fwd.pdf, fwd.m
    # dm/dmu = Phi, dm/dsigma = phi, dv/dmu = 2m(1 - Phi), dv/dsigma = 2 sigma Phi - 2 m phi
    grad_mu = grad_m * cdf + grad_v * 2.0 * m * (1.0 - cdf)
    grad_sigma = grad_m * pdf + grad_v * (2.0 * sigma * cdf - 2.0 * m * pdf)
    grad_log_sigma = grad_sigma * sigma

    prior_var = np.exp(2.0 * params.prior_log_sigma)
    delta_mu, dv = post.delta_mu, post.log_scale_residual
    grad_delta_mu = grad_mu + (beta / n) * delta_mu / prior_var
    grad_dv = grad_log_sigma + (beta / n) * np.expm1(2.0 * dv)

    grads = GradientSet.from_tensors({
        "enc_weights": np.vstack([grad_delta_mu.T @ x, grad_dv.T @ x]),
        "dictionary": grad_dict,
        "prior_mu": np.sum(grad_mu, axis=0),
        "prior_log_sigma": np.sum(grad_log_sigma, axis=0)
        - (beta / n) * np.sum(delta_mu ** 2, axis=0) / prior_var,
    })
    return fwd.breakdown, grads


def gradients(params: ModelParams, batch: Batch, beta: float) -> GradientSet:
    """Exact gradient of free_energy(...).total with respect to every parameter tensor."""
    return free_energy_and_gradients(params, batch, beta)[1]


# ---------------------------------------------------------------------------
# Sampling and the ELBO carving check
# ---------------------------------------------------------------------------

def sample_latents(params: ModelParams, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """Draw the decoder input h: Poisson counts, or relu of Gaussian samples."""
    post = encode(params, batch)
    if params.family is Family.POISSON:
        counts = math_dists.sample_poisson(np.maximum(post.rates, POSITIVE_FLOOR), rng)
        return counts.astype(np.float64)
    z = math_dists.sample_gaussian(post.mu, post.sigma, rng)
    return np.maximum(z, 0.0)


def sample_latents_per_datum(params: ModelParams, batch: Batch, seed: int, n_draws: int) -> np.ndarray:
    """
    ``n_draws`` decoder inputs per datum, datum ``i`` drawing from ``default_rng([seed, i])``.

    Returns
    -------
    np.ndarray
        (n_draws, B, K) array; slice ``d`` is the d-th representation of the batch
    """
    post = encode(params, batch)
    n, k = len(as_matrix(batch)), params.n_latents
    h = np.empty((n_draws, n, k))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if params.family is Family.POISSON:
            rates = np.broadcast_to(np.maximum(post.rates[i], POSITIVE_FLOOR), (n_draws, k))
            h[:, i] = math_dists.sample_poisson(rates, rng)
        else:
            z = math_dists.sample_gaussian(
                np.broadcast_to(post.mu[i], (n_draws, k)), np.broadcast_to(post.sigma[i], (n_draws, k)), rng
            )
            h[:, i] = np.maximum(z, 0.0)
    return h


def elbo_decomposition_check(
    params: ModelParams,
    batch: Batch,
    n_samples: int,
    rng: np.random.Generator,
    max_chunk_elements: int = 4_000_000
) -> ElboCarving:
    """
    Monte Carlo comparison of the two ELBO carvings for a Gaussian model.

    lhs = E_q[log p(x|z)] - KL          (distortion minus coding rate; KL closed form)
    rhs = E_q[log p(x, z)] + H[q]       (negative energy plus entropy; H closed form)

    Both are batch means over the same draws; ``mc_se`` is the standard error
    of lhs - rhs, whose expectation is zero.
    """
    if params.family is not Family.RECTIFIED_GAUSSIAN:
        raise ValueError("elbo_decomposition_check: unsupported for the Poisson family "
                         "(posterior entropy has no simple closed form)")
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be >= 10000, got {n_samples}")

    x = _checked_input(params, batch)
    post = encode(params, x)
    n, m_pixels = x.shape
    prior_sigma = np.exp(params.prior_log_sigma)
    var = post.sigma ** 2
    prior_var = prior_sigma ** 2

    kl_per_datum = np.array([
        math_dists.kl_gaussian(post.mu[b], var[b], params.prior_mu, prior_var) for b in range(n)
    ])
    entropy_per_datum = np.array([math_dists.gaussian_entropy(var[b]) for b in range(n)])
    log_norm = -m_pixels * _HALF_LOG_PI

    chunk = max(1, max_chunk_elements // (n * max(params.n_latents, m_pixels)))
    lhs_draws, rhs_draws = [], []
    remaining = n_samples
    while remaining > 0:
        s = min(chunk, remaining)
        z = post.mu[None] + post.sigma[None] * rng.standard_normal((s,) + post.mu.shape)
        residual = x[None] - np.maximum(z, 0.0) @ params.dictionary.T
        log_lik = log_norm - np.sum(residual * residual, axis=2)
        log_prior = np.sum(stats.norm.logpdf(z, params.prior_mu, prior_sigma), axis=2)
        lhs_draws.append(np.mean(log_lik - kl_per_datum, axis=1))
        rhs_draws.append(np.mean(log_lik + log_prior + entropy_per_datum, axis=1))
        remaining -= s

    lhs_draws = np.concatenate(lhs_draws)
    rhs_draws = np.concatenate(rhs_draws)
    diff = lhs_draws - rhs_draws
    return ElboCarving(
        lhs=float(lhs_draws.mean()),
        rhs=float(rhs_draws.mean()),
        mc_se=float(diff.std(ddof=1) / np.sqrt(n_samples)),
    )


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PVFE-CKPT"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<IBII")
_LENGTH = struct.Struct("<Q")
_FAMILY_TAGS = {Family.POISSON: 0, Family.RECTIFIED_GAUSSIAN: 1}


def save_checkpoint(params: ModelParams, path: str) -> None:
    """
    Write ``PVFE-CKPT``: magic, u32 version, u8 family tag, u32 K, u32 M, then
    each tensor as a u64 length and little-endian float64 values, then CRC32.
    """
    parts = [
        CHECKPOINT_MAGIC,
        _CKPT_HEADER.pack(CHECKPOINT_VERSION, _FAMILY_TAGS[params.family],
                          params.n_latents, params.n_pixels),
    ]
    for tensor in params.tensors().values():
        flat = np.ascontiguousarray(tensor, dtype="<f8").ravel()
        parts.append(_LENGTH.pack(flat.size))
        parts.append(flat.tobytes())
    write_checksummed(path, b"".join(parts))


def load_checkpoint(path: str) -> ModelParams:
    header_len = len(CHECKPOINT_MAGIC) + _CKPT_HEADER.size
    payload, stored_crc = read_checksummed(path, CHECKPOINT_MAGIC, header_len)
    version, tag, k, m_pixels = _CKPT_HEADER.unpack_from(payload, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
    families = {v: f for f, v in _FAMILY_TAGS.items()}
    if tag not in families:
        raise FileFormatError(f"{path}: unknown family tag {tag}")
    family = families[tag]

    heads = 1 if family is Family.POISSON else 2
    shapes = {"enc_weights": (heads * k, m_pixels), "dictionary": (m_pixels, k)}
    names = POISSON_TENSORS if family is Family.POISSON else GAUSSIAN_TENSORS
    tensors = {}
    offset = header_len
    for name in names:
        shape = shapes.get(name, (k,))
        if offset + _LENGTH.size > len(payload):
            raise TruncatedFileError(f"{path}: file ends before tensor '{name}'")
        (count,) = _LENGTH.unpack_from(payload, offset)
        offset += _LENGTH.size
        if count != int(np.prod(shape)):
            raise FileFormatError(f"{path}: tensor '{name}' has {count} values, expected {np.prod(shape)}")
        end = offset + 8 * count
        if end > len(payload):
            raise TruncatedFileError(f"{path}: file ends inside tensor '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(payload):
        raise FileFormatError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    verify_crc(path, payload, stored_crc)
    return ModelParams(family, **tensors)
