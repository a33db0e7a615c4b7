"""Counter-based random streams keyed by (seed, purpose, stage, ...).

Every random draw in a run comes from a Philox generator whose key is
derived from the run seed and a tuple of integers naming *where* the draw
happens (stage, sweep, particle chunk, ...).  Particle work is split into
chunks of a fixed size that does not depend on the number of threads, so
results are identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

CHUNK_SIZE = 1024

# purpose tags; stable integers, never reorder
INIT = 1
MUTATE = 2
RESAMPLE = 3
DATA = 4
ABC_PRIOR = 5
ABC_MOVE = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the substream ``key`` of run ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def resolve_threads(threads) -> int:
    if threads in (None, "auto"):
        return os.cpu_count() or 1
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be positive")
    return threads


def chunks(n: int, size: int = CHUNK_SIZE) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_chunks(
    fn: Callable[[int, slice], object],
    n: int,
    threads: int = 1,
    size: int = CHUNK_SIZE,
) -> list:
    """Apply ``fn(chunk_index, slice)`` over fixed-size chunks of ``range(n)``.

    Results come back in chunk order whatever the thread count.
    """
    parts: Sequence[slice] = chunks(n, size)
    if threads <= 1 or len(parts) == 1:
        return [fn(i, s) for i, s in enumerate(parts)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(len(parts)), parts))
