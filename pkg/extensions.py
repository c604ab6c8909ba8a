import logging
from concurrent.futures import ThreadPoolExecutor

from config import Config

LOG_FORMAT = '%(asctime)s %(levelname)s [%(name)s] %(message)s'


def configure_logging(level=None):
    """Installs one stream handler on the `omnifuse` logger namespace."""
    root = logging.getLogger('omnifuse')
    root.setLevel(level or Config.LOG_LEVEL)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    return root


def worker_pool(max_workers=None):
    """Thread pool capped by OMNIFUSE_THREADS."""
    workers = min(Config.THREADS, max_workers or Config.THREADS)
    return ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix='omnifuse-worker')
