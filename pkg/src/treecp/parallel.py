"""Reproducible replicate fan-out.

All randomness flows from one master seed; replicate k always runs on
SeedSequence([master, k]), so any replicate is reproducible in isolation
and results are independent of the worker count.  Aggregation happens in
replicate order regardless of completion order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

THREADS_ENV = "TREECP_THREADS"


def worker_count(explicit=None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def _run_chunk(fn: Callable, master_seed: int, indices: Sequence[int], args: tuple):
    return [fn(master_seed, k, *args) for k in indices]


def map_replicates(
    fn: Callable,
    n: int,
    master_seed: int,
    args: tuple = (),
    workers=None,
) -> list:
    """Evaluate fn(master_seed, k, *args) for k = 0..n-1, in replicate order.

    `fn` must be a module-level callable (picklable) and should derive its
    RNG from engine.replicate_seed(master_seed, k).
    """
    w = worker_count(workers)
    if w <= 1 or n <= 1:
        return [fn(master_seed, k, *args) for k in range(n)]
    chunk = max(1, n // (4 * w))
    blocks = [range(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    out: list = [None] * len(blocks)
    with ProcessPoolExecutor(max_workers=w) as pool:
        futures = [
            pool.submit(_run_chunk, fn, master_seed, list(blk), args) for blk in blocks
        ]
        for bi, fut in enumerate(futures):
            out[bi] = fut.result()
    flat: list = []
    for blk in out:
        flat.extend(blk)
    return flat
