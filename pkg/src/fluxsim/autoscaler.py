"""Horizontal scale decisions for a MiniCluster.

The replica rule is the usual ratio rule with a tolerance band.  Scale-ups
go out immediately; a scale-down is only requested when every decision in
the stabilization window wanted fewer pods, which keeps short lulls from
shrinking the cluster under a queue that is about to refill.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable

from .engine import Engine, Event
from .model import JobState, ValidationError

if TYPE_CHECKING:
    from .jobqueue import Instance

# absorbs float noise in ratio comparisons, e.g. 1.1 / 1.0 - 1 > 0.1
_EPS = 1e-9


class ScaleMode(str, Enum):
    UTILIZATION = "utilization"
    QUEUE_DEPTH = "queue_depth"


@dataclass(frozen=True)
class ScalePolicy:
    mode: ScaleMode = ScaleMode.QUEUE_DEPTH
    target: float = 1.0
    tolerance: float = 0.10
    check_interval: float = 15.0
    stabilization_window: float = 60.0
    min_size: int = 1
    max_size: int | None = None
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", ScaleMode(self.mode))
        if self.target <= 0:
            raise ValueError("target must be positive")
        if not 0 <= self.tolerance < 1:
            raise ValueError("tolerance must be in [0, 1)")
        if self.check_interval <= 0 or self.stabilization_window < 0:
            raise ValueError("check_interval must be positive and stabilization_window non-negative")


@dataclass(frozen=True)
class MetricSample:
    at: float
    current_utilization: float
    pending_node_demand: int
    queue_length: int

    def as_dict(self) -> dict:
        return {
            "at": self.at,
            "current_utilization": self.current_utilization,
            "pending_node_demand": self.pending_node_demand,
            "queue_length": self.queue_length,
        }


def desired_replicas(
    current: int, metric: float, target: float, tolerance: float = 0.10, bounds: tuple[int, int] | None = None
) -> int:
    """``ceil(current * metric / target)`` clamped to ``bounds``; unchanged inside the tolerance band."""
    if current < 1 or target <= 0:
        raise ValueError("current must be >= 1 and target > 0")
    lo, hi = bounds if bounds is not None else (1, None)
    ratio = metric / target
    if abs(ratio - 1.0) <= tolerance + _EPS:
        want = current
    else:
        want = math.ceil(current * ratio - _EPS)
    want = max(lo, want)
    if hi is not None:
        want = min(hi, want)
    return want


def queue_metric(instance: Instance, current_size: int, now: float | None = None) -> MetricSample:
    """Snapshot the queue the way the lead's metrics endpoint reports it."""
    pending = [j for j in instance.jobs.values() if j.state is JobState.PENDING]
    usable = instance.usable_ranks()
    busy = sum(1 for r in usable if instance.graph.ranks[r].job_id is not None)
    return MetricSample(
        at=instance.engine.now if now is None else now,
        current_utilization=busy / len(usable) if usable else 0.0,
        pending_node_demand=sum(j.spec.nodes for j in pending),
        queue_length=len(pending),
    )


def metric_value(sample: MetricSample, mode: ScaleMode, current_size: int) -> float:
    if mode is ScaleMode.UTILIZATION:
        return sample.current_utilization
    return sample.pending_node_demand / current_size


class Autoscaler:
    """Periodic ``scale_check`` events that feed the shared resize path.

    ``resize`` is the same callable a user patch or the REST API goes
    through; rejections come back as exceptions and are only logged.
    ``floor`` reports the smallest size that keeps every running job's
    ranks alive, so a scale-down never cuts under a job.
    """

    def __init__(
        self,
        engine: Engine,
        policy: ScalePolicy,
        instance: Callable[[], Instance | None],
        current_size: Callable[[], int],
        resize: Callable[[int, str], object],
        floor: Callable[[], int] = lambda: 1,
        max_size: int | None = None,
    ):
        self.engine = engine
        self.policy = policy
        self._instance = instance
        self._current = current_size
        self._resize = resize
        self._floor = floor
        self.max_size = policy.max_size or max_size
        self.history: deque[tuple[float, int]] = deque()
        self.requests: list[tuple[float, int, bool]] = []
        self._ticket: Event | None = None
        self._started_at: float | None = None

    def start(self) -> None:
        if not self.policy.enabled or self._ticket is not None:
            return
        self._started_at = self.engine.now
        self._ticket = self.engine.after(self.policy.check_interval, "scale_check", self._check)

    def stop(self) -> None:
        self.engine.cancel(self._ticket)
        self._ticket = None

    def _check(self, event: Event) -> None:
        self._ticket = self.engine.after(self.policy.check_interval, "scale_check", self._check)
        inst = self._instance()
        if inst is None:
            return
        current = self._current()
        sample = queue_metric(inst, current)
        metric = metric_value(sample, self.policy.mode, current)
        want = desired_replicas(
            current, metric, self.policy.target, self.policy.tolerance,
            (self.policy.min_size, self.max_size or current),
        )
        now = self.engine.now
        event.payload.update(current=current, desired=want, metric=metric)
        self.history.append((now, want))
        window = self.policy.stabilization_window
        while self.history and self.history[0][0] < now - window:
            self.history.popleft()

        if want > current:
            self._request(want)
        elif want < current:
            covered = self._started_at is not None and now - self._started_at >= window
            if covered and all(w < current for _, w in self.history):
                target = max(max(w for _, w in self.history), self._floor())
                if target < current:
                    self._request(target)

    def _request(self, size: int) -> None:
        try:
            self._resize(size, "autoscaler")
            ok = True
        except ValidationError as exc:
            self.engine.record("scale_rejected", size=size, reason=str(exc))
            ok = False
        self.requests.append((self.engine.now, size, ok))
