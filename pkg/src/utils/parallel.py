"""
Ordered worker pool helpers.

numpy releases the GIL inside its kernels, so a thread pool is enough to
overlap the per-frame and per-chunk work. Results always come back in
submission order, which keeps floating-point reductions reproducible for
a fixed worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, Tuple, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Apply ``fn`` to every item, returning results in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def group_aligned_chunks(keys: np.ndarray, parts: int) -> List[Tuple[int, int]]:
    """Split a sorted key array into at most ``parts`` contiguous ranges.

    Range boundaries never cut through a run of equal keys, so every
    panorama voxel's observations land in exactly one chunk.
    """
    n = len(keys)
    if n == 0:
        return []
    parts = max(1, min(parts, n))
    cuts = [0]
    for k in range(1, parts):
        pos = int(np.searchsorted(keys, keys[(k * n) // parts], side="left"))
        if pos > cuts[-1]:
            cuts.append(pos)
    cuts.append(n)
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]
