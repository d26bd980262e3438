#!/usr/bin/env python3
"""
Unit tests for utils, logger_config, parallel_processing and visualization helpers.
"""

import logging

import numpy as np
import pytest

import config
from logger_config import close_handlers, get_logger, resolve_level, setup_logger
from parallel_processing import process_jobs_parallel, resolve_workers
from utils import (
    ChecksumMismatchError,
    FileFormatError,
    TruncatedFileError,
    find_image_files,
    hash64,
    read_checksummed,
    verify_crc,
    write_checksummed,
)
from visualization import plot_dictionary, plot_training_curve


def _square(job, offset=0):
    return job * job + offset


def test_hash64_is_stable():
    assert hash64(0, "pvae", 64) == hash64(0, "pvae", 64)
    assert hash64(0, "pvae", 64) != hash64(0, "pvae", 65)
    assert hash64("ab", "c") != hash64("a", "bc")
    assert 0 <= hash64(1) < 2 ** 64


def test_find_image_files(tmp_path):
    for name in ("b.pgm", "a.PGM", "c.png"):
        (tmp_path / name).write_bytes(b"")
    names = [p.rsplit("/", 1)[-1] for p in find_image_files(str(tmp_path))]
    assert sorted(names) == ["a.PGM", "b.pgm"]


def test_checksummed_file(tmp_path):
    path = str(tmp_path / "blob")
    write_checksummed(path, b"MAGIC" + b"payload")
    payload, crc = read_checksummed(path, b"MAGIC", 5)
    assert payload == b"MAGICpayload"
    verify_crc(path, payload, crc)
    with pytest.raises(ChecksumMismatchError):
        verify_crc(path, payload + b"x", crc)
    with pytest.raises(FileFormatError):
        read_checksummed(path, b"OTHER", 5)
    with pytest.raises(TruncatedFileError):
        read_checksummed(path, b"MAGIC", 20)


def test_resolve_workers(monkeypatch):
    monkeypatch.setattr(config, "N_THREADS", None)
    assert resolve_workers(4, n_jobs=2) == 2
    assert resolve_workers(4, n_jobs=0) == 1
    assert resolve_workers(3) == 3
    monkeypatch.setattr(config, "N_THREADS", 2)
    assert resolve_workers(8) == 2
    assert resolve_workers(0) == 2


def test_process_jobs_sequential():
    assert list(process_jobs_parallel(_square, [1, 2, 3], n_workers=1, offset=1)) == [2, 5, 10]


def test_process_jobs_parallel():
    assert sorted(process_jobs_parallel(_square, [1, 2, 3, 4], n_workers=2)) == [1, 4, 9, 16]


def test_plot_helpers(tmp_path):
    rng = np.random.default_rng(0)
    plot_dictionary(rng.standard_normal((16, 5)), 4, str(tmp_path / "dict.png"))
    plot_training_curve([0, 1, 2], [3.0, 2.0, 1.5], [0.1, 0.2, 0.2], str(tmp_path / "curve.png"))
    assert (tmp_path / "dict.png").stat().st_size > 0
    assert (tmp_path / "curve.png").stat().st_size > 0


def test_resolve_level(monkeypatch):
    assert resolve_level(logging.WARNING) == logging.WARNING
    assert resolve_level("debug") == logging.DEBUG
    monkeypatch.setattr(config, "LOG_LEVEL", "ERROR")
    assert resolve_level(None) == logging.ERROR
    with pytest.raises(ValueError):
        resolve_level("loud")


def test_setup_logger_is_idempotent(tmp_path):
    name = "pvfe-test"
    try:
        logger = setup_logger(name, level="INFO", console=False, log_dir=str(tmp_path))
        assert len(logger.handlers) == 1
        logger.info("first")
        again = setup_logger(name, level=logging.DEBUG, console=False, log_dir=str(tmp_path))
        assert again is logger and len(logger.handlers) == 1
        assert logger.handlers[0].level == logging.DEBUG
        (log_file,) = list(tmp_path.glob("pvfe_*.log"))
        assert "INFO - first" in log_file.read_text()
    finally:
        close_handlers(name)
    assert get_logger("sweep").name == "pvfe.sweep"
