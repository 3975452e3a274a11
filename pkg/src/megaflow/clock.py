"""Clock interface shared by the simulated and the real execution paths.

The control plane only ever sees ``now_ms`` and ``call_later``, so the same
scheduler code runs against a virtual clock (discrete-event simulation) or
the wall clock (local subprocess execution).
"""

from __future__ import annotations

import heapq
import threading
import time
from typing import Callable, Protocol


class Clock(Protocol):
    def now_ms(self) -> int: ...

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None: ...

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> None: ...


class VirtualClock:
    """Discrete-event engine over a virtual millisecond timeline.

    Events fire in (time, insertion order) order, each exactly once; the
    clock never moves backward. Single-threaded by design: ``run`` drains
    the pending heap, and callbacks may schedule further events.
    """

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._heap: list = []
        self._insert_seq = 0
        self.fired = 0

    def now_ms(self) -> int:
        return self._now

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> None:
        if when_ms < self._now:
            raise ValueError(f"cannot schedule at {when_ms} before now={self._now}")
        heapq.heappush(self._heap, (when_ms, self._insert_seq, fn))
        self._insert_seq += 1

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        self.call_at(self._now + max(0, int(delay_ms)), fn)

    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> bool:
        """Fire the single earliest event; False when nothing is pending."""
        if not self._heap:
            return False
        when, _, fn = heapq.heappop(self._heap)
        assert when >= self._now, "virtual clock would move backward"
        self._now = when
        self.fired += 1
        fn()
        return True

    def run(self, until_ms: int | None = None, max_events: int = 50_000_000) -> int:
        """Drain pending events (optionally only up to ``until_ms``); returns count fired."""
        fired = 0
        while self._heap and fired < max_events:
            if until_ms is not None and self._heap[0][0] > until_ms:
                break
            self.step()
            fired += 1
        if until_ms is not None and self._now < until_ms:
            self._now = until_ms
        return fired


class WallClock:
    """Real-time clock; deferred calls run on daemon timer threads."""

    def __init__(self):
        self._epoch = time.time() - time.monotonic()

    def now_ms(self) -> int:
        return int((self._epoch + time.monotonic()) * 1000)

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        if delay_ms <= 0:
            fn()
            return
        timer = threading.Timer(delay_ms / 1000.0, fn)
        timer.daemon = True
        timer.start()

    def call_at(self, when_ms: int, fn: Callable[[], None]) -> None:
        self.call_later(when_ms - self.now_ms(), fn)
