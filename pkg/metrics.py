#!/usr/bin/env python3
"""
Evaluation metrics over sampled latent representations.
Metabolic cost, sparsity, reconstruction quality and the combined score.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Union

import numpy as np

import model as vae
from data import PatchBatch, as_matrix

SST_FLOOR = 1e-12
SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluated configuration."""
    family: str
    k: int
    beta: float
    seed: int
    mc: float
    pz: float
    r2: float
    overall: float

    def to_dict(self) -> Dict[str, Union[str, int, float]]:
        return asdict(self)


def metabolic_cost(h: np.ndarray) -> float:
    """
    Mean activity: grand mean of all entries of h.

    Parameters
    ----------
    h : np.ndarray
        Nonnegative (B, K) representation

    Returns
    -------
    float
        Mean spikes per neuron per sample
    """
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("metabolic_cost: h has negative entries (pass relu(z), not z)")
    return float(h.mean()) if h.size else 0.0


def proportion_zeros(h: np.ndarray) -> float:
    """Fraction of entries exactly equal to zero."""
    h = np.asarray(h)
    if h.size == 0:
        return 0.0
    return float(np.count_nonzero(h == 0) / h.size)


def proportion_nonzeros(h: np.ndarray) -> float:
    h = np.asarray(h)
    if h.size == 0:
        return 0.0
    return float(np.count_nonzero(h) / h.size)


def r_squared(x: Union[PatchBatch, np.ndarray], x_hat: Union[PatchBatch, np.ndarray]) -> float:
    """
    1 - SSE/SST with SST taken around the grand mean of x.

    Returns
    -------
    float
        R^2 <= 1 (negative when worse than predicting the mean)
    """
    x = as_matrix(x)
    x_hat = as_matrix(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: x{x.shape} vs x_hat{x_hat.shape}")
    sse = np.sum((x - x_hat) ** 2)
    sst = max(float(np.sum((x - x.mean()) ** 2)), SST_FLOOR)
    return float(1.0 - sse / sst)


def overall_performance(r2: float, pz: float) -> float:
    """Distance of (r2, pz) from the ideal (1, 1), divided by sqrt(2). Lower is better."""
    return float(np.hypot(1.0 - r2, 1.0 - pz) / SQRT2)


def evaluate(
    params: vae.ModelParams,
    validation: PatchBatch,
    seed: int,
    n_samples_per_datum: int = 8,
    beta: float = float("nan"),
    record_seed: Optional[int] = None
) -> MetricsRecord:
    """
    Metrics of sampled representations on validation data.

    Validation sample ``i`` draws its ``n_samples_per_datum`` representations
    from its own stream ``default_rng([seed, i])``, so samples are independent
    of one another. The d-th draws of all samples form representation h_d,
    reconstructed as x_hat = Phi h_d; MC, PZ and R^2 are averaged over d and
    the overall score is computed from the averaged R^2 and PZ.

    Parameters
    ----------
    params : ModelParams
        Trained model
    validation : PatchBatch
        Validation patches
    seed : int
        Base seed of the sampling streams
    n_samples_per_datum : int
        Independent posterior draws per validation patch
    beta : float
        KL weight the model was trained with (recorded only)
    record_seed : int, optional
        Seed identifier stored in the record (defaults to ``seed``)

    Returns
    -------
    MetricsRecord
    """
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    if n_samples_per_datum < 1:
        raise ValueError(f"n_samples_per_datum must be >= 1, got {n_samples_per_datum}")

    mcs, pzs, r2s = [], [], []
    for h in vae.sample_latents_per_datum(params, validation, seed, n_samples_per_datum):
        mcs.append(metabolic_cost(h))
        pzs.append(proportion_zeros(h))
        r2s.append(r_squared(validation, vae.reconstruct(params, h)))

    r2 = float(np.mean(r2s))
    pz = float(np.mean(pzs))
    return MetricsRecord(
        family=params.family.value,
        k=params.n_latents,
        beta=float(beta),
        seed=int(seed if record_seed is None else record_seed),
        mc=float(np.mean(mcs)),
        pz=pz,
        r2=r2,
        overall=overall_performance(r2, pz),
    )
