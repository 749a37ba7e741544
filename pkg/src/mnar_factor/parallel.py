"""Worker pool helpers for per-feature tasks."""

import os
from collections.abc import Callable, Iterable
from concurrent.futures import ProcessPoolExecutor
from typing import TypeVar

T = TypeVar("T")
R = TypeVar("R")

WORKERS_ENV_VAR = "MNAR_FACTOR_WORKERS"


def default_workers() -> int:
    """Worker count from MNAR_FACTOR_WORKERS, or 1 when unset or invalid."""
    value = os.environ.get(WORKERS_ENV_VAR, "")
    try:
        workers = int(value)
    except ValueError:
        return 1
    return max(workers, 1)


def map_tasks(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Apply ``fn`` to every item and return results in input order.

    Runs in-process when ``workers <= 1``; otherwise ``fn`` and the items
    must be picklable. Randomised tasks carry their own seed so results do
    not depend on the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    chunksize = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
