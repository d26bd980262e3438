#!/usr/bin/env python3
"""
Utility functions for file handling, seed derivation and checksummed binary files.
"""

import glob
import hashlib
import os
import struct
import zlib
from typing import List, Optional, Tuple


class FileFormatError(IOError):
    """Raised when a binary file has the wrong magic, version or layout."""


class TruncatedFileError(FileFormatError):
    """Raised when a binary file ends before its declared payload."""


class ChecksumMismatchError(FileFormatError):
    """Raised when the trailing CRC32 does not match the file contents."""


CRC_SIZE = 4


def find_image_files(directory: str, extensions: Optional[List[str]] = None) -> List[str]:
    """
    Find all image files in a directory.

    Parameters
    ----------
    directory : str
        Directory to search
    extensions : list, optional
        List of file extensions to search for

    Returns
    -------
    list
        Sorted list of image file paths
    """
    if extensions is None:
        extensions = ["pgm", "PGM"]

    image_paths = []
    for ext in extensions:
        pattern = os.path.join(directory, f"*.{ext}")
        image_paths.extend(glob.glob(pattern))

    return sorted(set(image_paths))


def hash64(*parts) -> int:
    """
    Derive a stable 64-bit seed from an ordered tuple of identifiers.

    The digest depends only on the ``repr`` of each part, so it is identical
    across processes and Python versions (unlike the builtin ``hash``).
    """
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(repr(part).encode("utf-8"))
        digest.update(b"\x1f")
    return int.from_bytes(digest.digest(), "little")


def write_checksummed(path: str, payload: bytes) -> None:
    """Write ``payload`` followed by its little-endian CRC32."""
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", crc))


def read_checksummed(path: str, magic: bytes, min_header: int) -> Tuple[bytes, int]:
    """
    Read a checksummed file and return ``(payload, stored_crc)``.

    Only the magic and the minimum header length are checked here; a file
    that stops inside the magic counts as truncated. Callers
    check the declared payload length next and call ``verify_crc`` last, so
    each failure mode surfaces as its own exception type.
    """
    with open(path, "rb") as f:
        raw = f.read()

    if raw[:len(magic)] != magic[:len(raw)]:
        raise FileFormatError(f"{path}: bad magic, expected {magic!r}")
    if len(raw) < min_header + CRC_SIZE:
        raise TruncatedFileError(f"{path}: file ends inside the header")

    payload, trailer = raw[:-CRC_SIZE], raw[-CRC_SIZE:]
    return payload, struct.unpack("<I", trailer)[0]


def verify_crc(path: str, payload: bytes, expected: int) -> None:
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != expected:
        raise ChecksumMismatchError(
            f"{path}: CRC mismatch (stored {expected:08x}, computed {actual:08x})"
        )
