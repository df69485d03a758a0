"""
Parallel Tool - Ordered map over a capped thread pool
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")

# Set once from the CLI (--threads); solvers read it through get_threads().
_threads = 1


def set_threads(n: int):
    global _threads
    _threads = max(1, int(n))


def get_threads() -> int:
    return _threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int = None) -> List[R]:
    """Map preserving input order; results never depend on the worker count"""
    items = list(items)
    n = get_threads() if threads is None else max(1, int(threads))
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
