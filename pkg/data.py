#!/usr/bin/env python3
"""
Image patch data: the PatchBatch container, a synthetic 1/f^alpha patch
generator for offline work, PGM ingestion with seeded random crops, and the
checksummed ``PVFE-PATCH`` file format.

Patch file layout (little-endian)::

    b"PVFE-PATCH"  u32 version=1  u32 N  u32 side
    N * side * side float32 values, row-major
    u32 CRC32 of everything above
"""

import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import cv2
import numpy as np

from logger_config import get_logger
from utils import (
    FileFormatError,
    TruncatedFileError,
    find_image_files,
    read_checksummed,
    verify_crc,
    write_checksummed,
)

logger = get_logger("data")

PATCH_MAGIC = b"PVFE-PATCH"
PATCH_VERSION = 1
_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class PatchBatch:
    """
    A batch of flattened square patches.

    Attributes
    ----------
    data : np.ndarray
        (N, side * side) float64 matrix, one patch per row
    side : int
        Patch side length in pixels
    """
    data: np.ndarray
    side: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"PatchBatch data must be 2-D, got shape {data.shape}")
        if self.side <= 0 or data.shape[1] != self.side * self.side:
            raise ValueError(
                f"PatchBatch width {data.shape[1]} does not match side {self.side} (expected side**2)"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("PatchBatch entries must be finite")
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[1]

    def images(self) -> np.ndarray:
        """View as (N, side, side)."""
        return self.data.reshape(-1, self.side, self.side)

    @classmethod
    def from_images(cls, images: np.ndarray) -> "PatchBatch":
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise ValueError(f"expected (N, side, side) square patches, got {images.shape}")
        return cls(images.reshape(images.shape[0], -1), images.shape[1])

    def subset(self, index) -> "PatchBatch":
        return PatchBatch(self.data[index], self.side)


def as_matrix(batch: Union[PatchBatch, np.ndarray]) -> np.ndarray:
    """Return the (N, M) float64 matrix behind a PatchBatch or raw array."""
    if isinstance(batch, PatchBatch):
        return batch.data
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected a (B, M) batch, got shape {x.shape}")
    return x


def split_validation(batch: PatchBatch, fraction: float, seed: int) -> Tuple[PatchBatch, PatchBatch]:
    """
    Hold out a seeded random fraction of patches.

    Returns
    -------
    tuple
        (train, validation)
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    n_valid = max(1, int(round(len(batch) * fraction)))
    if n_valid >= len(batch):
        raise ValueError("not enough patches to hold out a validation split")
    order = np.random.default_rng(seed).permutation(len(batch))
    return batch.subset(np.sort(order[n_valid:])), batch.subset(np.sort(order[:n_valid]))


# ---------------------------------------------------------------------------
# Synthetic natural-statistics patches
# ---------------------------------------------------------------------------

def radial_frequency(side: int) -> np.ndarray:
    """Radial frequency grid in cycles/pixel (Nyquist = 0.5), in np.fft layout."""
    freqs = np.fft.fftfreq(side)
    return np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)


def synth_patches(
    n: int,
    side: int = 16,
    alpha: float = 2.0,
    seed: int = 0,
    field_scale: int = 4
) -> PatchBatch:
    """
    Gaussian random-field patches with power spectrum proportional to 1/f^alpha.

    Each field is white noise shaped in the frequency domain (amplitude
    f^(-alpha/2), zero DC) and cropped into non-overlapping side x side tiles,
    so patch borders are not periodic. With ``field_scale = 1`` every patch
    is its own periodic field and its expected periodogram follows the power
    law exactly.

    Parameters
    ----------
    n : int
        Number of patches
    side : int
        Patch side length
    alpha : float
        Spectral exponent (0 gives white noise)
    seed : int
        Generator seed
    field_scale : int
        Field side as a multiple of the patch side

    Returns
    -------
    PatchBatch
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if field_scale < 1:
        raise ValueError(f"field_scale must be >= 1, got {field_scale}")
    rng = np.random.default_rng(seed)
    field_side = side * field_scale
    tiles_per_field = field_scale * field_scale
    n_fields = -(-n // tiles_per_field)

    f = radial_frequency(field_side)
    amplitude = np.zeros_like(f)
    nonzero = f > 0
    amplitude[nonzero] = f[nonzero] ** (-alpha / 2.0)

    noise = rng.standard_normal((n_fields, field_side, field_side))
    fields = np.fft.ifft2(np.fft.fft2(noise, axes=(1, 2)) * amplitude, axes=(1, 2)).real

    tiles = fields.reshape(n_fields, field_scale, side, field_scale, side)
    tiles = tiles.transpose(0, 1, 3, 2, 4).reshape(-1, side, side)
    return PatchBatch.from_images(tiles[:n])


# ---------------------------------------------------------------------------
# PGM ingestion
# ---------------------------------------------------------------------------

def load_image(path: str) -> np.ndarray:
    """
    Load an 8-bit grayscale image (PGM) as float64 in [0, 1].

    Parameters
    ----------
    path : str
        Path to image file

    Returns
    -------
    np.ndarray
        (H, W) image
    """
    img = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise IOError(f"Cannot read image: {path}")
    return img.astype(np.float64) / 255.0


def load_pgm_directory(directory: str) -> List[np.ndarray]:
    paths = find_image_files(directory)
    if not paths:
        raise IOError(f"No PGM images found in {directory}")
    logger.info(f"Found {len(paths)} images in {directory}")
    return [load_image(p) for p in paths]


def extract_patches(images: Sequence[np.ndarray], side: int, n: int, seed: int) -> PatchBatch:
    """
    Seeded random square crops, images chosen uniformly per patch.

    Images smaller than ``side`` in either dimension are skipped.
    """
    usable = [img for img in images if img.shape[0] >= side and img.shape[1] >= side]
    if not usable:
        raise ValueError(f"no image is at least {side}x{side}")
    rng = np.random.default_rng(seed)
    patches = np.empty((n, side, side))
    which = rng.integers(len(usable), size=n)
    for i, idx in enumerate(which):
        img = usable[idx]
        row = rng.integers(img.shape[0] - side + 1)
        col = rng.integers(img.shape[1] - side + 1)
        patches[i] = img[row:row + side, col:col + side]
    return PatchBatch.from_images(patches)


# ---------------------------------------------------------------------------
# Patch file format
# ---------------------------------------------------------------------------

def save_patches(patches: PatchBatch, path: str) -> None:
    """Write patches in the PVFE-PATCH format (values stored as float32)."""
    values = patches.data.astype("<f4")
    header = PATCH_MAGIC + _HEADER.pack(PATCH_VERSION, len(patches), patches.side)
    write_checksummed(path, header + values.tobytes(order="C"))


def load_patches(path: str) -> PatchBatch:
    """
    Read a PVFE-PATCH file.

    Raises
    ------
    FileFormatError
        Bad magic or unsupported version
    TruncatedFileError
        Fewer values than the header declares
    ChecksumMismatchError
        CRC32 does not match
    """
    header_len = len(PATCH_MAGIC) + _HEADER.size
    payload, stored_crc = read_checksummed(path, PATCH_MAGIC, header_len)
    version, n, side = _HEADER.unpack_from(payload, len(PATCH_MAGIC))
    if version != PATCH_VERSION:
        raise FileFormatError(f"{path}: unsupported patch file version {version}")

    expected = header_len + 4 * n * side * side
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FileFormatError(f"{path}: {len(payload) - expected} unexpected trailing bytes")
    verify_crc(path, payload, stored_crc)

    values = np.frombuffer(payload, dtype="<f4", offset=header_len, count=n * side * side)
    return PatchBatch(values.astype(np.float64).reshape(n, side * side), side)
