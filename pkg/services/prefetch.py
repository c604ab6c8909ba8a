"""
prefetch.py

Batch preparation ahead of the training loop: a daemon thread loads and
tokenizes the next batches into a bounded queue while the consumer trains on
the current one. Order is preserved, so prefetching never changes results.

A failure inside the worker is logged and re-raised in the consumer on the
next read.
"""

import logging
import queue
import threading

from config import Config

logger = logging.getLogger('omnifuse.prefetch')

_DONE = object()


class _Failure:
    def __init__(self, error):
        self.error = error


def start_prefetch_worker(loader, batches, depth=None):
    """
    Runs `loader(item)` for every item of `batches` on a daemon thread and
    yields the results in order; at most `depth` results wait in the queue.
    """
    depth = depth or Config.PREFETCH_DEPTH
    out = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()

    def work():
        try:
            for item in batches:
                if stop.is_set():
                    return
                out.put(loader(item))
        except Exception as e:
            logger.error(f"Prefetch worker error: {e}", exc_info=True)
            out.put(_Failure(e))
            return
        out.put(_DONE)

    t = threading.Thread(target=work, name="omnifuse-prefetch", daemon=True)
    t.start()

    def consume():
        try:
            while True:
                item = out.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.error
                yield item
        finally:
            stop.set()
            # unblock a worker waiting on a full queue
            while t.is_alive():
                try:
                    out.get_nowait()
                except queue.Empty:
                    t.join(timeout=0.05)

    return consume()
