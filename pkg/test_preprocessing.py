#!/usr/bin/env python3
"""
Unit tests for preprocessing module.
"""

import numpy as np
import pytest

from data import PatchBatch, synth_patches
from preprocessing import (
    PreprocConfig,
    ZScoreStats,
    local_contrast_normalize,
    preprocess_frozen,
    preprocess_pipeline,
    whiten,
    whitening_filter,
    zscore,
)


def test_whitening_filter_values():
    cfg = PreprocConfig()
    filt = whitening_filter(4, cfg)
    assert filt[0, 0] == 0.0
    assert filt[0, 1] == pytest.approx(0.25 * np.exp(-(0.5 ** 4)))


def test_constant_patches_whiten_to_zero():
    batch = PatchBatch(np.full((3, 64), 4.2), 8)
    assert np.max(np.abs(whiten(batch).data)) < 1e-12


def test_whiten_preserves_shape():
    batch = synth_patches(5, side=8, seed=0)
    out = whiten(batch)
    assert out.data.shape == batch.data.shape
    assert np.all(np.isfinite(out.data))


def test_whitening_flattens_power_law():
    """A 1/f^2 spectrum times R(f)^2 ~ f^2 is flat at low frequency."""
    patches = synth_patches(2000, side=16, alpha=2.0, seed=1, field_scale=1)
    power = np.mean(np.abs(np.fft.fft2(whiten(patches).images(), axes=(1, 2))) ** 2, axis=0)
    low = power[0, 1], power[0, 2], power[1, 1]
    assert max(low) / min(low) < 1.5


def test_lcn_constant_patch_is_zero():
    batch = PatchBatch(np.full((2, 16), 3.0), 4)
    assert np.allclose(local_contrast_normalize(batch).data, 0.0)


def test_lcn_kernel_larger_than_patch():
    batch = synth_patches(4, side=4, seed=0)
    out = local_contrast_normalize(batch, PreprocConfig(lcn_kernel=13))
    assert out.data.shape == (4, 16)
    assert np.all(np.isfinite(out.data))


def test_preproc_config_validation():
    with pytest.raises(ValueError):
        PreprocConfig(lcn_kernel=4)
    with pytest.raises(ValueError):
        PreprocConfig(f0=0.0)


def test_zscore():
    rng = np.random.default_rng(0)
    batch = PatchBatch(rng.normal(3.0, 2.0, size=(50, 4)), 2)
    out = zscore(batch)
    assert np.allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(out.data.std(axis=0), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        zscore(batch.subset(slice(0, 1)))


def test_zscore_constant_column_is_floored():
    data = np.zeros((5, 4))
    data[:, 1] = np.arange(5)
    stats = ZScoreStats.fit(PatchBatch(data, 2))
    assert stats.std[0] == pytest.approx(1e-8)
    assert np.all(np.isfinite(stats.apply(PatchBatch(data, 2)).data))


def test_pipeline_standardizes_columns():
    patches = synth_patches(500, side=8, seed=2)
    processed, stats = preprocess_pipeline(patches)
    assert np.max(np.abs(processed.data.mean(axis=0))) <= 1e-6
    assert np.max(np.abs(processed.data.std(axis=0) - 1.0)) <= 1e-6
    assert np.allclose(preprocess_frozen(patches, stats).data, processed.data)


def test_frozen_pipeline_uses_training_statistics():
    train = synth_patches(300, side=8, seed=3)
    valid = synth_patches(50, side=8, seed=4)
    _, stats = preprocess_pipeline(train)
    frozen = preprocess_frozen(valid, stats)
    refit, _ = preprocess_pipeline(valid)
    assert frozen.data.shape == (50, 64)
    assert not np.allclose(frozen.data, refit.data)


def test_whiten_scales_sinusoid_by_filter_gain():
    """A single DFT frequency passes with amplitude R(f) and its phase unchanged."""
    side, kx, ky, phase = 16, 2, 1, 0.7
    yy, xx = np.mgrid[0:side, 0:side]
    wave = np.cos(2 * np.pi * (kx * xx + ky * yy) / side + phase)
    out = whiten(PatchBatch.from_images(wave[None]))
    gain = whitening_filter(side, PreprocConfig())[ky, kx]
    assert gain == pytest.approx(np.hypot(kx, ky) / side * np.exp(-(np.hypot(kx, ky) / side / 0.5) ** 4))
    assert np.allclose(out.images()[0], gain * wave, atol=1e-12)


def test_whiten_is_linear():
    rng = np.random.default_rng(5)
    a = PatchBatch(rng.standard_normal((3, 64)), 8)
    b = PatchBatch(rng.standard_normal((3, 64)), 8)
    combined = whiten(PatchBatch(2.0 * a.data - 0.5 * b.data, 8)).data
    assert np.allclose(combined, 2.0 * whiten(a).data - 0.5 * whiten(b).data, rtol=0, atol=1e-10)


def test_lcn_checkerboard_has_unit_local_std():
    yy, xx = np.mgrid[0:8, 0:8]
    board = np.where((xx + yy) % 2 == 0, 1.0, -1.0)
    out = local_contrast_normalize(PatchBatch.from_images(board[None])).images()[0]
    assert np.allclose(np.abs(out), 1.0, atol=1e-5)
    assert np.array_equal(np.sign(out), board)


def test_lcn_is_scale_invariant():
    """Random high-contrast patches (local variance far above eps) give the same output at 10x."""
    rng = np.random.default_rng(6)
    yy, xx = np.mgrid[0:8, 0:8]
    signs = np.where((xx + yy) % 2 == 0, 1.0, -1.0).ravel()
    batch = PatchBatch(signs * rng.uniform(1.0, 2.0, size=(5, 64)), 8)
    scaled = PatchBatch(10.0 * batch.data, 8)
    assert np.allclose(local_contrast_normalize(scaled).data, local_contrast_normalize(batch).data, atol=5e-5)
