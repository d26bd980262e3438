#!/usr/bin/env python3
"""
Parallel processing utilities for independent sweep jobs.
"""

from functools import partial
from multiprocessing import Pool, cpu_count
from typing import Any, Callable, Iterator, Optional, Sequence

import config
from logger_config import get_logger

logger = get_logger("parallel")


def resolve_workers(n_workers: Optional[int] = None, n_jobs: Optional[int] = None) -> int:
    """
    Number of worker processes.

    Parameters
    ----------
    n_workers : int, optional
        Explicit request; 0 or None means auto (PVFE_THREADS, else CPU count - 1)
    n_jobs : int, optional
        Never start more workers than there are jobs

    Returns
    -------
    int
        At least 1
    """
    if not n_workers:
        n_workers = config.N_THREADS or max(1, cpu_count() - 1)
    if config.N_THREADS:
        n_workers = min(n_workers, config.N_THREADS)
    if n_jobs is not None:
        n_workers = min(n_workers, max(1, n_jobs))
    return max(1, int(n_workers))


def process_jobs_parallel(
    func: Callable[..., Any],
    jobs: Sequence[Any],
    n_workers: Optional[int] = None,
    **kwargs
) -> Iterator[Any]:
    """
    Run ``func(job, **kwargs)`` for every job and yield results as they finish.

    With a single worker the jobs run in-process, in order. ``func`` must be a
    module-level function so it can be pickled.

    Parameters
    ----------
    func : callable
        Job function
    jobs : sequence
        Job descriptions
    n_workers : int, optional
        Number of worker processes. Defaults to CPU count - 1
    **kwargs
        Fixed keyword arguments shared by every job

    Yields
    ------
    Any
        Return values of ``func`` in completion order
    """
    n_workers = resolve_workers(n_workers, len(jobs))
    process_func = partial(func, **kwargs)

    if n_workers == 1 or len(jobs) <= 1:
        logger.info(f"Running {len(jobs)} jobs sequentially")
        for job in jobs:
            yield process_func(job)
        return

    logger.info(f"Running {len(jobs)} jobs on {n_workers} workers")
    with Pool(n_workers) as pool:
        for result in pool.imap_unordered(process_func, jobs):
            yield result

