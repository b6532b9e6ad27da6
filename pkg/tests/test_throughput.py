from gatedsr.utils import throughput
from gatedsr.utils.throughput import ThroughputMeter


def _clock(monkeypatch, ticks):
    values = iter(ticks)
    monkeypatch.setattr(throughput.time, "perf_counter", lambda: next(values))


def test_rate_over_window(monkeypatch):
    _clock(monkeypatch, [0.0, 1.0, 3.0, 4.0])
    meter = ThroughputMeter(buffer_len=2)
    assert meter.tick(100) == 100.0
    assert meter.tick(100) == 66.67
    # the first tick has left the window
    assert meter.tick(400) == 166.67


def test_zero_elapsed_time(monkeypatch):
    _clock(monkeypatch, [5.0, 5.0])
    assert ThroughputMeter().tick(10) == 0.0
