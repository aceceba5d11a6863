"""Clocks injected wherever durations or timestamps land in persisted artifacts.

Scripted replay runs use ``LogicalClock`` so that traces are byte-identical
across runs; live runs use ``SystemClock``.
"""

from __future__ import annotations

import time


class SystemClock:
    def now(self) -> float:
        return time.time()

    def time(self) -> float:
        return self.now()

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class LogicalClock:
    """Deterministic clock: every reading advances a counter by one tick."""

    def __init__(self, start: float = 0.0, tick: float = 1.0):
        self._t = float(start)
        self._tick = float(tick)

    def now(self) -> float:
        t = self._t
        self._t += self._tick
        return t

    def time(self) -> float:
        return self.now()

    def monotonic(self) -> float:
        return self.now()

    def sleep(self, seconds: float) -> None:
        self._t += float(seconds)


SYSTEM_CLOCK = SystemClock()
