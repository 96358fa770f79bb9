"""Single-threaded discrete-event loop with a deterministic tie-break.

The heap orders events by (time, key, sequence). ``key`` defaults to a large
sentinel; callers that care about same-instant ordering pass (node id, kind
rank) so interleavings are reproducible no matter how events were posted.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

LATE_KEY = (1 << 30, 1 << 30)


@dataclass
class SimClock:
    """Monotonic simulation time; advances only by event processing."""

    now: float = 0.0


@dataclass(order=True)
class _Entry:
    time: float
    key: tuple
    seq: int
    fn: Callable[[], None] = field(compare=False)
    housekeeping: bool = field(compare=False, default=False)
    cancelled: bool = field(compare=False, default=False)


class EventLoop:
    def __init__(self) -> None:
        self.clock = SimClock()
        self._heap: list[_Entry] = []
        self._seq = 0
        self._pending = 0  # non-housekeeping, non-cancelled entries

    @property
    def now(self) -> float:
        return self.clock.now

    def schedule(self, at: float, fn: Callable[[], None],
                 key: tuple = LATE_KEY, housekeeping: bool = False) -> _Entry:
        if at < self.clock.now - 1e-9:
            raise ValueError(f"cannot schedule event in the past: {at} < {self.now}")
        entry = _Entry(time=max(at, self.clock.now), key=key, seq=self._seq,
                       fn=fn, housekeeping=housekeeping)
        self._seq += 1
        heapq.heappush(self._heap, entry)
        if not housekeeping:
            self._pending += 1
        return entry

    def schedule_in(self, delay: float, fn: Callable[[], None],
                    key: tuple = LATE_KEY, housekeeping: bool = False) -> _Entry:
        return self.schedule(self.clock.now + delay, fn, key, housekeeping)

    def cancel(self, entry: _Entry) -> None:
        if not entry.cancelled:
            entry.cancelled = True
            if not entry.housekeeping:
                self._pending -= 1

    def has_pending_work(self) -> bool:
        return self._pending > 0

    def step(self) -> bool:
        """Process one event; returns False when the heap is drained."""
        while self._heap:
            entry = heapq.heappop(self._heap)
            if entry.cancelled:
                continue
            if not entry.housekeeping:
                self._pending -= 1
            self.clock.now = entry.time
            entry.fn()
            return True
        return False

    def run(self, until: float | None = None,
            stop_when_idle: bool = False) -> None:
        """Drain the queue, optionally stopping at a time cap or when only
        housekeeping events (heartbeat timers and the like) remain."""
        while self._heap:
            if stop_when_idle and self._pending == 0:
                return
            head = self._heap[0]
            if head.cancelled:
                heapq.heappop(self._heap)
                continue
            if until is not None and head.time > until:
                self.clock.now = until
                return
            self.step()
