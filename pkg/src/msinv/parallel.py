"""Thread-pool helper for independent per-block work.

Results come back indexed by task, so merge order is fixed regardless of the
worker count; combined with disjoint (or fixed-order accumulated) write
targets this keeps parallel runs bitwise identical to serial ones.

Pools are created once per worker count and reused; work is dispatched in
contiguous chunks (one per worker) to keep per-task overhead off the clock.
The effective thread count never exceeds the physical cores: oversubscribing
CPU-bound numeric work only adds cache thrash and scheduler churn.
"""

import os
import threading
from concurrent.futures import ThreadPoolExecutor

_POOLS = {}
_POOLS_GUARD = threading.Lock()


def effective_workers(workers):
    cores = os.cpu_count() or 1
    return max(1, min(workers or 1, cores))


def _pool(w):
    with _POOLS_GUARD:
        pool = _POOLS.get(w)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=w)
            _POOLS[w] = pool
        return pool


def run_indexed(fn, n_items, workers=1):
    """Evaluate ``fn(i)`` for ``i in range(n_items)``; returns results in order."""
    w = effective_workers(workers)
    if w <= 1 or n_items <= 1:
        return [fn(i) for i in range(n_items)]

    bounds = [(n_items * c) // w for c in range(w + 1)]

    def chunk(c):
        return [fn(i) for i in range(bounds[c], bounds[c + 1])]

    out = []
    for part in _pool(w).map(chunk, range(w)):
        out.extend(part)
    return out
