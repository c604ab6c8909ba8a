import threading
import time

import pytest

from services.prefetch import start_prefetch_worker


def test_results_arrive_in_order():
    def slow_square(x):
        time.sleep(0.001 * (5 - x % 5))
        return x * x

    assert list(start_prefetch_worker(slow_square, range(20), depth=3)) == [x * x for x in range(20)]


def test_worker_failure_is_raised_in_the_consumer():
    def loader(x):
        if x == 3:
            raise ValueError('bad tile')
        return x

    seen = []
    with pytest.raises(ValueError, match='bad tile'):
        for item in start_prefetch_worker(loader, range(10), depth=2):
            seen.append(item)
    assert seen == [0, 1, 2]


def test_abandoned_consumer_stops_the_worker():
    loaded = []

    def loader(x):
        loaded.append(x)
        return x

    stream = start_prefetch_worker(loader, range(1000), depth=1)
    assert next(stream) == 0
    stream.close()
    assert len(loaded) < 1000
    assert not [t for t in threading.enumerate() if t.name == 'omnifuse-prefetch' and t.is_alive()]
