"""
Deterministic work distribution.

Work is cut into chunks whose size never depends on the worker count, and
results come back in input order. Any reduction over chunk results done in that
order is therefore bit-identical for 1 or N workers.
"""

from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np
from joblib import Parallel, delayed

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(workers: Optional[int]) -> int:
    """
    :param workers: Requested worker count, None for the settings default.
    :return: A worker count >= 1.
    """
    if workers is None:
        from settings import WORKERS

        workers = WORKERS
    return max(1, int(workers))


def ordered_map(
    fn: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None
) -> List[R]:
    """
    Apply fn to every item, possibly concurrently, returning results in input order.
    :param fn: Pure function of one item.
    :param items: Work items.
    :param workers: Concurrency budget; <= 1 runs inline.
    :return: [fn(item) for item in items]
    """
    n_workers = resolve_workers(workers)
    if n_workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results: List[R] = Parallel(n_jobs=min(n_workers, len(items)), prefer="threads")(
        delayed(fn)(item) for item in items
    )
    return results


def chunk_slices(total: int, chunk: Optional[int] = None) -> List[slice]:
    """
    Split range(total) into contiguous slices of a fixed size.
    :param total: Number of elements.
    :param chunk: Slice length, None for settings.CHUNK_RAYS.
    :return: List of slices covering range(total) in order.
    """
    if chunk is None:
        from settings import CHUNK_RAYS

        chunk = CHUNK_RAYS
    chunk = max(1, int(chunk))
    return [slice(start, min(start + chunk, total)) for start in range(0, total, chunk)]


def spawn_rngs(seed: int, n: int) -> List[np.random.Generator]:
    """
    Independent random streams derived from a root seed and the task index.
    :param seed: Root seed.
    :param n: Number of streams.
    :return: n generators; stream i only depends on (seed, i).
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def derive_seed(seed: int, index: int) -> int:
    """
    A 64-bit integer seed for task `index` under root `seed`.
    """
    lo, hi = np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(2)
    return int(lo) | (int(hi) << 32)
