"""Worker processes for per-item work (frame rendering, augmentation, folds).

Work items are mapped over a ``multiprocess`` pool created from a spawn context;
results come back in item order, so outputs never depend on scheduling. With
``jobs=1`` everything runs in the calling process.
"""

import multiprocess as mp
from multiprocess.queues import Queue
from queue import Empty
import traceback

from latentaug.logger import emit, queue_log

_WORKER_LOG_QUEUE = None


def worker_log(level, msg):
    """Log from inside a worker function."""

    queue_log(_WORKER_LOG_QUEUE, level, msg)


def _init_worker(initializer, initargs, log_queue):

    global _WORKER_LOG_QUEUE
    _WORKER_LOG_QUEUE = log_queue

    if initializer is not None:
        initializer(*initargs)


def _call_worker(args):

    worker, item = args

    try:
        return worker(item)
    except Exception:
        worker_log("error", f"Process: worker failed on item {item!r}\n{traceback.format_exc()}")
        raise


class LatentAugPool:
    """LatentAugPool Class

    Runs a module-level ``worker`` over items, optionally in background processes
    using the multiprocess package.
    """

    def __init__(self, jobs=1, initializer=None, initargs=(), ctx=None, log_queue=None):
        """Constructor method

        Parameters
        ----------
        jobs : int
            maximum number of worker processes; 1 runs in-process
        initializer : callable, optional
            called once per worker (and once in-process) with ``initargs``,
            typically to load checkpoints into module globals
        initargs : tuple
            arguments for ``initializer``
        ctx : multiprocessing context
        log_queue : multiprocessing Queue
            queue to pass messages to the run's log file
        """

        self.jobs = max(1, int(jobs))
        self.initializer = initializer
        self.initargs = tuple(initargs)
        self.ctx = mp.get_context("spawn") if ctx is None else ctx
        self.log_queue = log_queue

    def map(self, worker, items):

        items = list(items)

        if self.jobs == 1 or len(items) <= 1:

            _init_worker(self.initializer, self.initargs, self.log_queue)
            return [_call_worker((worker, item)) for item in items]

        own_queue = self.log_queue is None
        log_queue = Queue(ctx=self.ctx) if own_queue else self.log_queue

        with self.ctx.Pool(
            processes=min(self.jobs, len(items)),
            initializer=_init_worker,
            initargs=(self.initializer, self.initargs, log_queue),
        ) as pool:
            results = pool.map(_call_worker, [(worker, item) for item in items], chunksize=1)

        # nobody drains a private queue, so flush it here
        if own_queue:
            while True:
                try:
                    emit(*log_queue.get_nowait())
                except Empty:
                    break

        return results
