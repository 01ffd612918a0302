"""Order-preserving thread pool helper capped by ``HSTU_THREADS``."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def thread_limit(default: int = 1) -> int:
    """Worker cap from ``HSTU_THREADS``; invalid values fall back to ``default``."""
    raw = os.getenv("HSTU_THREADS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring non-integer HSTU_THREADS={raw!r}")
        return default


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """``[fn(x) for x in items]`` on up to ``threads`` workers, results in input order."""
    items = list(items)
    workers = min(threads or thread_limit(), max(1, len(items)))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
