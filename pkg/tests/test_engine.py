import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fluxsim.engine import Engine, LatencyModel, PastDeadline, dump_log, load_log


def test_event_fires_at_its_time():
    e = Engine()
    seen = []
    e.schedule(5.0, "tick", lambda ev: seen.append(e.now))
    e.run_until()
    assert seen == [5.0]


def test_ties_break_by_sequence():
    e = Engine()
    order = []
    e.schedule(5.0, "a", lambda ev: order.append("a"))
    e.schedule(5.0, "b", lambda ev: order.append("b"))
    e.run_until()
    assert order == ["a", "b"]
    assert [r["seq"] for r in e.log] == [1, 2]


def test_cancelled_event_never_fires():
    e = Engine()
    fired = []
    ticket = e.schedule(5.0, "x", lambda ev: fired.append(1))
    e.cancel(ticket)
    e.run_until()
    assert fired == [] and e.log == []


def test_past_deadline():
    e = Engine()
    e.schedule(3.0, "x")
    e.run_until()
    with pytest.raises(PastDeadline):
        e.schedule(1.0, "late")


def test_empty_queue_with_deadline_returns_current_clock():
    assert Engine().run_until(deadline=100) == 0.0


def test_deadline_stops_before_later_events():
    e = Engine()
    e.schedule(50.0, "x")
    assert e.run_until(deadline=10.0) == 10.0
    assert e.log == []
    assert e.advance(60.0) == 60.0
    assert [r["kind"] for r in e.log] == ["x"]


def test_predicate_stops_the_loop():
    e = Engine()
    for t in range(10):
        e.schedule(float(t), "t")
    assert e.run_until(lambda: len(e.log) == 3) == 2.0


@given(st.lists(st.floats(0, 1000, allow_nan=False), max_size=60))
def test_clock_is_monotone(times):
    e = Engine()
    seen = []
    for t in times:
        e.schedule(t, "x", lambda ev: seen.append(e.now))
    e.run_until()
    assert seen == sorted(times)


@given(st.sampled_from(["uniform", "normal-truncated"]), st.floats(0, 10), st.floats(0, 20), st.integers(0, 2**32))
def test_samples_never_negative(dist, base, jitter, seed):
    m = LatencyModel("m", base, jitter, dist)
    rng = random.Random(seed)
    assert all(m.sample(rng) >= 0 for _ in range(50))


def test_same_seed_same_trace():
    def trace(seed):
        e = Engine(seed)
        m = LatencyModel("m", 1.0, 0.5, "normal-truncated")

        def hop(ev):
            if ev.payload["n"] < 20:
                e.after(e.sample(m), "hop", hop, {"n": ev.payload["n"] + 1})

        e.schedule(0.0, "hop", hop, {"n": 0})
        e.run_until()
        return dump_log(e.log)

    assert trace(7) == trace(7)
    assert trace(7) != trace(8)
    assert len(load_log(trace(7))) == 21


def test_posted_commands_run_on_the_loop():
    e = Engine()
    e.schedule(1.0, "x")
    results = []

    def client():
        results.append(e.post(lambda: e.now).result(timeout=5))

    t = threading.Thread(target=client)
    t.start()
    while t.is_alive():
        e.drain()
    assert results == [0.0]


def test_command_exceptions_reach_the_caller():
    e = Engine()
    fut = e.post(lambda: 1 / 0)
    e.drain()
    with pytest.raises(ZeroDivisionError):
        fut.result()
