"""Deterministic discrete-event core.

One virtual clock, one heap ordered by ``(fire_at, sequence)``, one seeded
``random.Random``.  Modules never build their own randomness; they call
:meth:`Engine.sample` with a :class:`LatencyModel`.

Callers outside the event loop (the REST server thread) hand work to the
loop with :meth:`Engine.post`; the loop runs posted commands between events.
"""

from __future__ import annotations

import heapq
import json
import logging
import queue
import random
from concurrent.futures import Future
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

logger = logging.getLogger(__name__)


class PastDeadline(ValueError):
    pass


class Distribution(str, Enum):
    CONSTANT = "constant"
    UNIFORM = "uniform"
    NORMAL_TRUNCATED = "normal-truncated"


@dataclass(frozen=True)
class LatencyModel:
    name: str = "latency"
    base: float = 0.0
    jitter: float = 0.0
    distribution: Distribution = Distribution.CONSTANT

    def __post_init__(self):
        if self.base < 0 or self.jitter < 0:
            raise ValueError(f"{self.name}: base and jitter must be >= 0")
        object.__setattr__(self, "distribution", Distribution(self.distribution))

    def sample(self, rng: random.Random) -> float:
        if self.distribution is Distribution.CONSTANT or self.jitter == 0:
            return self.base
        if self.distribution is Distribution.UNIFORM:
            return max(0.0, rng.uniform(self.base - self.jitter, self.base + self.jitter))
        return max(0.0, rng.gauss(self.base, self.jitter))

    @classmethod
    def constant(cls, base: float, name: str = "latency") -> LatencyModel:
        return cls(name=name, base=base)


@dataclass(order=True)
class Event:
    fire_at: float
    sequence: int
    kind: str = field(compare=False)
    payload: dict[str, Any] = field(compare=False, default_factory=dict)
    handler: Callable[[Event], None] | None = field(compare=False, default=None, repr=False)
    cancelled: bool = field(compare=False, default=False)
    # silent events drive the loop but stay out of the trace (e.g. idle ticks)
    silent: bool = field(compare=False, default=False)


class Engine:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self._commands: queue.SimpleQueue[tuple[Callable[[], Any], Future]] = queue.SimpleQueue()
        self.log: list[dict[str, Any]] = []
        self.context: dict[str, Any] = {}
        self._observers: list[Callable[[Event], None]] = []

    def schedule(
        self,
        fire_at: float,
        kind: str,
        handler: Callable[[Event], None] | None = None,
        payload: dict[str, Any] | None = None,
        *,
        silent: bool = False,
    ) -> Event:
        """Queue an event; the returned event doubles as a cancellation ticket."""
        if fire_at < self.now:
            raise PastDeadline(f"{kind} at {fire_at} is before clock {self.now}")
        self._seq += 1
        event = Event(fire_at, self._seq, kind, dict(payload or {}), handler, silent=silent)
        heapq.heappush(self._heap, event)
        return event

    def after(self, delay: float, kind: str, handler=None, payload=None, *, silent: bool = False) -> Event:
        return self.schedule(self.now + max(0.0, delay), kind, handler, payload, silent=silent)

    @staticmethod
    def cancel(ticket: Event | None) -> None:
        if ticket is not None:
            ticket.cancelled = True

    def sample(self, model: LatencyModel) -> float:
        return model.sample(self.rng)

    def record(self, kind: str, **payload) -> None:
        """Append an instantaneous record to the trace without scheduling anything."""
        self._seq += 1
        self._append(self.now, self._seq, kind, payload)

    def observe(self, fn: Callable[[Event], None]) -> None:
        """Register a callback run after every delivered event (audits, tests)."""
        self._observers.append(fn)

    def _append(self, at: float, seq: int, kind: str, payload: dict[str, Any]) -> None:
        entry = {"time": at, "seq": seq, "kind": kind, "payload": payload}
        if self.context:
            entry = {**self.context, **entry}
        self.log.append(entry)

    def pending(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)

    def peek_time(self) -> float | None:
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0].fire_at if self._heap else None

    def step(self) -> Event | None:
        self.drain()
        while self._heap:
            event = heapq.heappop(self._heap)
            if event.cancelled:
                continue
            self.now = event.fire_at
            if not event.silent:
                self._append(event.fire_at, event.sequence, event.kind, event.payload)
            if event.handler is not None:
                event.handler(event)
            for fn in self._observers:
                fn(event)
            self.drain()
            return event
        return None

    def run_until(self, predicate: Callable[[], bool] | None = None, deadline: float | None = None) -> float:
        """Deliver events in order until ``predicate()`` holds, the heap is empty,
        or the next event lies past ``deadline`` (the clock then moves to the deadline).
        An exhausted queue leaves the clock where the last event put it."""
        while True:
            if predicate is not None and predicate():
                return self.now
            nxt = self.peek_time()
            if nxt is None:
                self.drain()
                if self.peek_time() is None:
                    return self.now
                continue
            if deadline is not None and nxt > deadline:
                self.now = max(self.now, deadline)
                self.drain()
                return self.now
            self.step()

    def advance(self, to: float) -> float:
        """Deliver every event up to ``to`` and leave the clock exactly there."""
        self.run_until(deadline=to)
        self.now = max(self.now, to)
        return self.now

    # command channel used by request handlers living outside the loop

    def post(self, fn: Callable[[], Any]) -> Future:
        fut: Future = Future()
        self._commands.put((fn, fut))
        return fut

    def drain(self) -> int:
        count = 0
        while True:
            try:
                fn, fut = self._commands.get_nowait()
            except queue.Empty:
                return count
            count += 1
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(fn())
            except BaseException as exc:  # handed back to the caller thread
                fut.set_exception(exc)


def dump_log(records: Iterable[dict[str, Any]]) -> str:
    """Line-delimited JSON, one record per line, keys in emission order."""
    return "".join(json.dumps(r, separators=(",", ":"), default=_json_default) + "\n" for r in records)


def load_log(text: str) -> list[dict[str, Any]]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _json_default(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, bytes):
        return obj.hex()
    raise TypeError(f"not serializable: {type(obj).__name__}")
