"""Process-pool helper for independent replicate tasks.

Workers run single-threaded BLAS (the factorizations here are far below
the size where threading pays) and tasks are mapped in submission order,
so a reduction over the results is deterministic for a fixed seed set.
"""

from __future__ import annotations

import multiprocessing as mp

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

_worker_fn = None
_worker_ctx = None


def _init_worker(fn, ctx):
    global _worker_fn, _worker_ctx
    _worker_fn = fn
    _worker_ctx = ctx
    if threadpool_limits is not None:
        threadpool_limits(limits=1)


def _run_task(arg):
    return _worker_fn(_worker_ctx, arg)


def map_tasks(fn, ctx, args, workers: int = 1):
    """Apply ``fn(ctx, arg)`` over ``args``, optionally in worker processes.

    ``ctx`` is shipped to each worker once; per-task arguments should stay
    small (seeds, indices).  Results come back in the order of ``args``.
    """
    args = list(args)
    if workers <= 1 or len(args) <= 1:
        if threadpool_limits is not None:
            with threadpool_limits(limits=1):
                return [fn(ctx, a) for a in args]
        return [fn(ctx, a) for a in args]
    nproc = min(workers, len(args))
    cx = mp.get_context("fork")
    with cx.Pool(nproc, initializer=_init_worker, initargs=(fn, ctx)) as pool:
        return pool.map(_run_task, args, chunksize=1)
