import pytest
from hypothesis import given, strategies as st

from cpsim.desim import (EventQueue, HandlerFault, PastEvent, periodic_time, round_half_up, seconds,
                         ticks_before)


def drain(q, t_end):
    fired = []
    q.run_until(t_end, lambda ev: fired.append((ev.fire_at, ev.kind)))
    return fired


def test_fifo_among_equal_times():
    q = EventQueue()
    for name in "abc":
        q.schedule(10, name)
    q.schedule(5, "first")
    assert drain(q, 10) == [(5, "first"), (10, "a"), (10, "b"), (10, "c")]


def test_run_until_is_inclusive_and_sets_clock():
    q = EventQueue()
    q.schedule(100, "x")
    q.schedule(101, "y")
    assert drain(q, 100) == [(100, "x")]
    assert q.clock == 100
    assert q.peek_time() == 101


def test_cancel_is_lazy_and_idempotent():
    q = EventQueue()
    a = q.schedule(1, "a")
    q.schedule(2, "b")
    assert q.cancel(a)
    assert not q.cancel(a)
    assert len(q) == 1
    assert drain(q, 10) == [(2, "b")]


def test_past_scheduling_rejected():
    q = EventQueue()
    q.schedule(5, "a")
    drain(q, 5)
    with pytest.raises(PastEvent):
        q.schedule(4, "late")
    with pytest.raises(PastEvent):
        q.run_until(3, lambda ev: None)


def test_handler_exception_wrapped():
    q = EventQueue()
    q.schedule(1, "boom")

    def handler(ev):
        raise ZeroDivisionError

    with pytest.raises(HandlerFault) as info:
        q.run_until(2, handler)
    assert info.value.event.kind == "boom"


def test_handler_may_schedule_at_current_time():
    q = EventQueue()
    seen = []

    def handler(ev):
        seen.append(ev.kind)
        if ev.kind == "a":
            q.schedule(ev.fire_at, "b")

    q.schedule(7, "a")
    q.run_until(7, handler)
    assert seen == ["a", "b"]


def test_pmu_clock_grid():
    assert [periodic_time(k, 30) for k in range(4)] == [0, 33_333_333, 66_666_667, 100_000_000]
    assert periodic_time(30, 30) == 1_000_000_000
    assert ticks_before(seconds(1.0), 30) == 30
    assert ticks_before(1_000_000_001, 30) == 31


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2


@given(st.lists(st.tuples(st.integers(0, 1000), st.booleans()), max_size=60), st.integers(0, 1000))
def test_order_matches_sorted_oracle(items, horizon):
    q = EventQueue()
    ids = []
    for i, (t, cancel) in enumerate(items):
        ids.append((q.schedule(t, str(i)), t, cancel, i))
    for eid, _, cancel, _ in ids:
        if cancel:
            q.cancel(eid)
    expected = [(t, str(i)) for _, t, cancel, i in sorted(ids, key=lambda r: (r[1], r[3]))
                if not cancel and t <= horizon]
    assert drain(q, horizon) == expected


@given(st.integers(0, 10_000), st.integers(1, 240))
def test_periodic_time_monotone_and_close(k, rate):
    t0, t1 = periodic_time(k, rate), periodic_time(k + 1, rate)
    assert t1 > t0
    assert abs(t0 - k * 1e9 / rate) <= 0.5
