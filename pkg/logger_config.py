#!/usr/bin/env python3
"""
Logging configuration for the Poisson free-energy toolkit.

``main.py`` configures the root ``pvfe`` logger once per run; library modules
only ask for a child logger through ``get_logger`` and never add handlers.
"""

import logging
import os
from datetime import datetime
from typing import Optional, Union

import config

ROOT_LOGGER = "pvfe"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CONSOLE_FORMAT = "%(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def resolve_level(level: Union[int, str, None]) -> int:
    """Numeric level from a number, a level name or None (``config.LOG_LEVEL``)."""
    if level is None:
        level = config.LOG_LEVEL
    if isinstance(level, int):
        return level
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level '{level}'")
    return numeric


def _run_log_path(log_dir: str) -> str:
    os.makedirs(log_dir, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    return os.path.join(log_dir, f"{ROOT_LOGGER}_{timestamp}.log")


def setup_logger(
    name: str = ROOT_LOGGER,
    log_file: Optional[str] = None,
    level: Union[int, str, None] = None,
    console: bool = True,
    log_dir: Optional[str] = None
) -> logging.Logger:
    """
    Attach a file handler and an optional console handler to ``name``.

    Parameters
    ----------
    name : str
        Logger name
    log_file : str, optional
        Log file path; by default a timestamped file in ``log_dir``
    level : int or str, optional
        Level number or name; defaults to ``config.LOG_LEVEL``
    console : bool
        Also log to stderr
    log_dir : str, optional
        Directory for the timestamped file (defaults to ``config.LOG_DIR``)

    Returns
    -------
    logging.Logger
        Configured logger. Calling again only updates the level.
    """
    numeric = resolve_level(level)
    logger = logging.getLogger(name)
    logger.setLevel(numeric)

    if logger.handlers:
        for handler in logger.handlers:
            handler.setLevel(numeric)
        return logger

    if log_file is None:
        log_file = _run_log_path(log_dir or config.LOG_DIR)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)

    handlers = [logging.FileHandler(log_file)]
    handlers[0].setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
    if console:
        handlers.append(logging.StreamHandler())
        handlers[1].setFormatter(logging.Formatter(CONSOLE_FORMAT))
    for handler in handlers:
        handler.setLevel(numeric)
        logger.addHandler(handler)
    return logger


def close_handlers(name: str = ROOT_LOGGER) -> None:
    """Detach and close every handler of ``name``."""
    logger = logging.getLogger(name)
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)


def get_logger(component: str) -> logging.Logger:
    """Return the child logger ``pvfe.<component>`` used by library modules."""
    return logging.getLogger(f"{ROOT_LOGGER}.{component}")
