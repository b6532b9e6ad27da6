from collections import deque
import time


class ThroughputMeter(object):
    """Rolling items-per-second over the last ``buffer_len`` ticks."""

    def __init__(self, buffer_len=1):
        self._start_tick = time.perf_counter()
        self._window = deque(maxlen=buffer_len)

    def tick(self, count=1):
        current_tick = time.perf_counter()
        elapsed = current_tick - self._start_tick
        self._start_tick = current_tick

        self._window.append((count, elapsed))

        total_time = sum(dt for _, dt in self._window)
        if total_time <= 0.0:
            return 0.0
        rate = sum(n for n, _ in self._window) / total_time
        return round(rate, 2)
