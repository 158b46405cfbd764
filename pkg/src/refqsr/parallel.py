"""Worker-count policy for per-patch parallelism (``REFQSR_THREADS``)."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Defaults to a single worker; results never depend on the count."""
    raw = os.environ.get("REFQSR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"REFQSR_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))
