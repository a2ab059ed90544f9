"""This module contains a helper that maps a function over independent jobs with a process pool."""
import logging
import os
from multiprocessing import Pool
from typing import Callable, List, Optional, Sequence, TypeVar

from ..errors import ConfigError

logger = logging.getLogger(__name__)

JobT = TypeVar("JobT")
ResultT = TypeVar("ResultT")


def available_workers() -> int:
    return os.cpu_count() or 1


def run_jobs(func: Callable[[JobT], ResultT], jobs: Sequence[JobT], workers: Optional[int] = None) -> List[ResultT]:
    """Apply `func` to every job and return the results in job order.

    `func` must be a module level function. With one worker, or a single job, the jobs run in the
    calling process.
    """
    workers = available_workers() if workers is None else workers
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")

    if workers == 1 or len(jobs) <= 1:
        return [func(job) for job in jobs]

    workers = min(workers, len(jobs))
    logger.debug("running %d jobs on %d workers", len(jobs), workers)
    with Pool(workers) as pool:
        return pool.map(func, jobs)
