"""
Shared worker pool
One lazily created thread pool, sized by BRANCHDIFF_THREADS, used for Monte
Carlo replicate blocks and grid evaluation
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from .config import thread_count

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


# Global instance
worker_pool: Optional[ThreadPoolExecutor] = None


def get_worker_pool() -> ThreadPoolExecutor:
    """Get or create the shared thread pool"""
    global worker_pool
    if worker_pool is None:
        workers = thread_count()
        worker_pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="branchdiff")
        logger.debug(f"Created worker pool with {workers} threads")
    return worker_pool


def shutdown_worker_pool() -> None:
    """Shut the shared pool down; the next get_worker_pool() creates a new one"""
    global worker_pool
    if worker_pool is not None:
        worker_pool.shutdown(wait=True)
        worker_pool = None


def ordered_map(func: Callable[[T], R], items: Iterable[T], parallel: bool = True) -> List[R]:
    """Apply func to items on the pool and return results in submission order"""
    items = list(items)
    if not parallel or len(items) < 2:
        return [func(item) for item in items]
    futures = [get_worker_pool().submit(func, item) for item in items]
    return [f.result() for f in futures]
