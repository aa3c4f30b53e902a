"""Small shared utilities: thread-pool mapping with deterministic order."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

DEFAULT_THREADS_ENV = "DEPTHPRIOR_THREADS"


def resolve_threads(flag_value: int | None = None) -> int:
    """Thread count: explicit flag wins, then the environment, then all cores."""
    if flag_value is not None:
        n = int(flag_value)
    else:
        raw = os.environ.get(DEFAULT_THREADS_ENV, "").strip()
        n = int(raw) if raw else (os.cpu_count() or 1)
    if n < 1:
        raise ValueError("thread count must be at least 1")
    return n


def parallel_map(fn, items, n_threads: int = 1) -> list:
    """Map fn over items, preserving item order in the result.

    Each item is computed independently and results are gathered in input
    order, so the output is identical whatever the thread count.
    """
    items = list(items)
    if n_threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))
