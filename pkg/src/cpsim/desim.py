"""Deterministic discrete-event kernel.

Time is an integer number of nanoseconds. Events are ordered by
``(fire_at, seq)`` where ``seq`` is the insertion counter, so two runs fed
with the same inputs pop events in exactly the same order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, TextIO

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000
# Keeps trace files and CSV columns representable as signed 64-bit integers.
MAX_TICKS = 2**63 - 1

SimTime = int


class PastEvent(ValueError):
    pass


class HandlerFault(RuntimeError):
    def __init__(self, event: "Event", cause: BaseException):
        super().__init__(f"handler failed on {event.kind} at {event.fire_at} ns: {cause!r}")
        self.event = event
        self.cause = cause


def check_time(ticks: int) -> SimTime:
    if not isinstance(ticks, int) or isinstance(ticks, bool):
        raise TypeError(f"simulation time must be an int of ns, got {ticks!r}")
    if ticks < 0 or ticks > MAX_TICKS:
        raise OverflowError(f"simulation time out of range: {ticks}")
    return ticks


def round_half_up(x: float) -> int:
    """Round a non-negative quantity of nanoseconds half-up."""
    return int(x + 0.5) if x >= 0 else -int(-x + 0.5)


def seconds(t: float) -> SimTime:
    return check_time(round_half_up(t * NS_PER_S))


def millis(t: float) -> SimTime:
    return check_time(round_half_up(t * NS_PER_MS))


def to_seconds(t: SimTime) -> float:
    return t / NS_PER_S


def to_millis(t: SimTime) -> float:
    return t / NS_PER_MS


@dataclass(order=True)
class Event:
    fire_at: SimTime
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(default=None, compare=False)

    def summary(self) -> str:
        p = self.payload
        if p is None:
            return ""
        if isinstance(p, tuple):
            return " ".join(str(x) for x in p)
        return str(p)


@dataclass
class SimStats:
    events: int = 0
    max_depth: int = 0


class EventQueue:
    """Min-heap of pending events with lazy cancellation."""

    def __init__(self, trace: Optional[TextIO] = None):
        self.clock: SimTime = 0
        self._heap: list[tuple[SimTime, int, Event]] = []   # tuples keep comparisons in C
        self._pending: dict[int, Event] = {}
        self._seq = 0
        self.n_scheduled = 0
        self.n_fired = 0
        self.n_cancelled = 0
        self.trace = trace

    def __len__(self) -> int:
        return len(self._pending)

    def schedule(self, fire_at: SimTime, kind: str, payload: Any = None) -> int:
        if fire_at < self.clock:
            raise PastEvent(f"cannot schedule {kind} at {fire_at} ns, clock is {self.clock} ns")
        check_time(fire_at)
        ev = Event(fire_at, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, (fire_at, ev.seq, ev))
        self._pending[ev.seq] = ev
        self.n_scheduled += 1
        return ev.seq

    def cancel(self, event_id: int) -> bool:
        if self._pending.pop(event_id, None) is None:
            return False
        self.n_cancelled += 1
        return True

    def peek_time(self) -> Optional[SimTime]:
        heap = self._heap
        while heap and heap[0][1] not in self._pending:
            heapq.heappop(heap)
        return heap[0][0] if heap else None

    def pop(self) -> Event:
        heap = self._heap
        while True:
            ev = heapq.heappop(heap)[2]
            if self._pending.pop(ev.seq, None) is not None:
                break
        self.clock = ev.fire_at
        self.n_fired += 1
        if self.trace is not None:
            self.trace.write(f"{ev.fire_at}\t{ev.seq}\t{ev.kind}\t{ev.summary()}\n")
        return ev

    def run_until(self, t_end: SimTime, handler: Callable[[Event], None]) -> SimStats:
        """Fire every event with ``fire_at <= t_end`` in order, then set the clock to ``t_end``."""
        if t_end < self.clock:
            raise PastEvent(f"run_until({t_end}) is behind clock {self.clock}")
        stats = SimStats(max_depth=len(self._pending))
        while True:
            nxt = self.peek_time()
            if nxt is None or nxt > t_end:
                break
            ev = self.pop()
            try:
                handler(ev)
            except HandlerFault:
                raise
            except Exception as exc:
                raise HandlerFault(ev, exc) from exc
            stats.events += 1
            if len(self._pending) > stats.max_depth:
                stats.max_depth = len(self._pending)
        self.clock = t_end
        return stats


def periodic_time(k: int, rate_hz: int) -> SimTime:
    """Time of the k-th tick of a ``rate_hz`` clock, rounded half-up to the ns grid."""
    return check_time((2 * k * NS_PER_S + rate_hz) // (2 * rate_hz))


def ticks_before(t_end: SimTime, rate_hz: int) -> int:
    """Number of ticks of a ``rate_hz`` clock strictly before ``t_end``."""
    # rate_hz * t_end / 1e9 is only an estimate; walk to the exact boundary.
    k = max(0, (t_end * rate_hz) // NS_PER_S - 1)
    while periodic_time(k, rate_hz) < t_end:
        k += 1
    while k > 0 and periodic_time(k - 1, rate_hz) >= t_end:
        k -= 1
    return k
