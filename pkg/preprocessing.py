#!/usr/bin/env python3
"""
Patch preprocessing: whitening, local contrast normalization and z-scoring.

The pipeline order is extract -> whiten -> LCN -> z-score. Whitening and LCN
act on each patch independently; z-score statistics are fit on the training
set and applied frozen to validation data.
"""

from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np

from data import PatchBatch, radial_frequency

LCN_EPS = 1e-6
ZSCORE_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class PreprocConfig:
    """
    Attributes
    ----------
    f0 : float
        Whitening roll-off frequency (cycles/pixel)
    n_exp : float
        Whitening roll-off exponent
    lcn_kernel : int
        Odd LCN Gaussian kernel size
    lcn_sigma : float
        LCN Gaussian width (pixels)
    """
    f0: float = 0.5
    n_exp: float = 4.0
    lcn_kernel: int = 13
    lcn_sigma: float = 0.5

    def __post_init__(self):
        if self.lcn_kernel <= 0 or self.lcn_kernel % 2 == 0:
            raise ValueError(f"lcn_kernel must be a positive odd integer, got {self.lcn_kernel}")
        if self.f0 <= 0 or self.n_exp <= 0 or self.lcn_sigma <= 0:
            raise ValueError("f0, n_exp and lcn_sigma must be positive")


@dataclass(frozen=True)
class ZScoreStats:
    """Per-pixel-position mean and (floored) std fit on a training set."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, patches: PatchBatch) -> "ZScoreStats":
        if len(patches) < 2:
            raise ValueError(f"zscore needs at least 2 patches, got {len(patches)}")
        x = patches.data
        return cls(mean=x.mean(axis=0), std=np.maximum(x.std(axis=0), ZSCORE_STD_FLOOR))

    def apply(self, patches: PatchBatch) -> PatchBatch:
        return PatchBatch((patches.data - self.mean) / self.std, patches.side)


def whitening_filter(side: int, cfg: PreprocConfig) -> np.ndarray:
    """R(f) = f exp(-(f/f0)^n) on the DFT grid; R(0) = 0 removes the DC term."""
    f = radial_frequency(side)
    return f * np.exp(-(f / cfg.f0) ** cfg.n_exp)


def whiten(patches: PatchBatch, cfg: PreprocConfig = PreprocConfig()) -> PatchBatch:
    """
    Per-patch frequency-domain whitening.

    Parameters
    ----------
    patches : PatchBatch
        Square patches
    cfg : PreprocConfig
        Filter parameters

    Returns
    -------
    PatchBatch
        Whitened patches (real part of the inverse DFT)
    """
    images = patches.images()
    if images.shape[1] != images.shape[2]:
        raise ValueError("whiten requires square patches")
    spectrum = np.fft.fft2(images, axes=(1, 2))
    filtered = np.fft.ifft2(spectrum * whitening_filter(patches.side, cfg), axes=(1, 2))
    return PatchBatch.from_images(filtered.real)


def _gaussian_blur(img: np.ndarray, cfg: PreprocConfig) -> np.ndarray:
    # Normalized Gaussian kernel, reflect padding
    return cv2.GaussianBlur(
        img,
        (cfg.lcn_kernel, cfg.lcn_kernel),
        cfg.lcn_sigma,
        borderType=cv2.BORDER_REFLECT_101,
    )


def local_contrast_normalize(patches: PatchBatch, cfg: PreprocConfig = PreprocConfig()) -> PatchBatch:
    """
    x' = (x - G*x) / sqrt(G*(x - G*x)^2 + eps), G a normalized Gaussian.

    Kernels larger than the patch are handled by the reflected border.
    """
    out = np.empty_like(patches.images())
    for i, img in enumerate(patches.images()):
        img = np.ascontiguousarray(img)
        centred = img - _gaussian_blur(img, cfg)
        local_var = _gaussian_blur(centred * centred, cfg)
        out[i] = centred / np.sqrt(local_var + LCN_EPS)
    return PatchBatch.from_images(out)


def zscore(patches: PatchBatch) -> PatchBatch:
    """Standardize each pixel position over the dataset (std floored at 1e-8)."""
    return ZScoreStats.fit(patches).apply(patches)


def preprocess_pipeline(
    patches: PatchBatch,
    cfg: PreprocConfig = PreprocConfig()
) -> Tuple[PatchBatch, ZScoreStats]:
    """
    Whiten, contrast-normalize and z-score a training set.

    Returns
    -------
    tuple
        (processed patches, z-score statistics for frozen reuse on validation data)
    """
    normalized = local_contrast_normalize(whiten(patches, cfg), cfg)
    stats = ZScoreStats.fit(normalized)
    return stats.apply(normalized), stats


def preprocess_frozen(patches: PatchBatch, stats: ZScoreStats, cfg: PreprocConfig = PreprocConfig()) -> PatchBatch:
    """Same pipeline with z-score statistics taken from the training set."""
    return stats.apply(local_contrast_normalize(whiten(patches, cfg), cfg))
