"""The lead broker's queue and scheduler.

Resources are tracked per broker rank and per socket.  A job takes whole
ranks (node-exclusive); inside each rank its tasks are spread over the
sockets so the core accounting stays socket-granular.  Scheduling is
priority-ordered first fit: every pending job that fits starts, the rest wait.

Instances form a tree.  The root owns every rank; a sub-instance is granted
a set of ranks taken from its parent's free pool and schedules only there.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .engine import Engine, Event, LatencyModel
from .model import (
    TERMINAL_STATES,
    ArchiveSnapshot,
    JobRecord,
    JobSpec,
    JobState,
    ResourceShape,
    Slot,
    ValidationError,
)

logger = logging.getLogger(__name__)

ROOT = "root"
ARCHIVE_VERSION = 1
# one line per job, keys in this order
ARCHIVE_FIELDS = (
    "job_id",
    "user",
    "nodes",
    "tasks_per_node",
    "work_units",
    "serial_fraction",
    "burstable",
    "command",
    "state",
    "submit_time",
    "start_time",
    "remaining",
)


class InvalidJob(ValidationError):
    pass


class UnknownJob(KeyError):
    pass


class UnknownUser(KeyError):
    pass


class SlotsUnavailable(RuntimeError):
    pass


class IdCollision(RuntimeError):
    pass


class QueueNotPaused(RuntimeError):
    pass


def wall_time_model(spec: JobSpec, allocation: Iterable[Slot] | None = None, alpha: float = 0.0) -> float:
    """Amdahl-style runtime plus a per-hop latency term.

    ``serial * T1 + (1 - serial) * T1 / R + alpha * log2(N)`` with T1 the
    job's total work, R the ranks actually placed and N the node count.
    """
    slots = list(allocation) if allocation is not None else []
    if slots:
        ranks = sum(s.cores for s in slots)
        nodes = len({s.rank for s in slots})
    else:
        ranks, nodes = spec.ranks, spec.nodes
    t1 = spec.work_units
    s = spec.serial_fraction
    return s * t1 + (1.0 - s) * t1 / ranks + alpha * math.log2(nodes)


class FairShareLedger:
    """Decayed per-user usage and the share-weighted priority derived from it."""

    def __init__(self, half_life: float = 1000.0, weights: dict[str, float] | None = None, default_weight: float | None = 1.0):
        if half_life <= 0:
            raise ValueError("half_life must be positive")
        self.half_life = half_life
        self.default_weight = default_weight
        self.weights: dict[str, float] = dict(weights or {})
        self._usage: dict[str, tuple[float, float]] = {}

    def register(self, user: str, weight: float | None = None) -> None:
        if user in self.weights and weight is None:
            return
        if weight is None:
            if self.default_weight is None:
                raise UnknownUser(user)
            weight = self.default_weight
        self.weights[user] = weight

    def knows(self, user: str) -> bool:
        return user in self.weights

    def usage(self, user: str, now: float) -> float:
        value, at = self._usage.get(user, (0.0, now))
        return value * 0.5 ** ((now - at) / self.half_life)

    def charge(self, user: str, amount: float, now: float) -> None:
        self._usage[user] = (self.usage(user, now) + amount, now)

    def set_usage(self, user: str, amount: float, now: float) -> None:
        self._usage[user] = (amount, now)


def fair_share_priority(user: str, ledger: FairShareLedger, now: float = 0.0) -> float:
    if not ledger.knows(user):
        raise UnknownUser(user)
    return ledger.weights[user] / (1.0 + ledger.usage(user, now))


@dataclass
class RankResource:
    rank: int
    node_id: str
    shape: ResourceShape
    used: list[int] = field(default_factory=list)
    job_id: int | None = None
    # only this job may run here (ranks lent by a burst)
    reserved_for: int | None = None
    # the external launcher joins the overlay but does no work
    schedulable: bool = True

    def __post_init__(self):
        if not self.used:
            self.used = [0] * self.shape.sockets


class ResourceGraph:
    """Online ranks and their socket usage, plus which instance owns each rank."""

    def __init__(self):
        self.ranks: dict[int, RankResource] = {}
        self.owner: dict[int, str] = {}

    def add_rank(self, rank: int, node_id: str, shape: ResourceShape, *, reserved_for=None, schedulable=True) -> None:
        self.ranks[rank] = RankResource(rank, node_id, shape, reserved_for=reserved_for, schedulable=schedulable)

    def remove_rank(self, rank: int) -> RankResource | None:
        return self.ranks.pop(rank, None)

    def owner_of(self, rank: int) -> str:
        return self.owner.get(rank, ROOT)

    def discovered_cores(self) -> int:
        return sum(r.shape.cores for r in self.ranks.values())

    def allocate(self, job_id: int, ranks: list[int], tasks_per_node: int) -> frozenset[Slot]:
        slots = []
        for rank in ranks:
            res = self.ranks[rank]
            assert res.job_id is None, f"rank {rank} already holds job {res.job_id}"
            sockets = res.shape.sockets
            base, extra = divmod(tasks_per_node, sockets)
            for sock in range(sockets):
                cores = base + (1 if sock < extra else 0)
                if cores == 0:
                    continue
                if res.used[sock] + cores > res.shape.cores_per_socket:
                    raise SlotsUnavailable(f"rank {rank} socket {sock} over capacity")
                res.used[sock] += cores
                slots.append(Slot(rank, res.node_id, sock, cores))
            res.job_id = job_id
        return frozenset(slots)

    def release(self, slots: Iterable[Slot]) -> None:
        for slot in slots:
            res = self.ranks.get(slot.rank)
            if res is None:
                continue
            res.used[slot.socket] -= slot.cores
            res.job_id = None


@dataclass
class _Run:
    ticket: Event
    run_start: float
    full_wall: float


class _IdCounter:
    def __init__(self, start: int = 1):
        self.next = start

    def take(self) -> int:
        n = self.next
        self.next += 1
        return n


class Instance:
    """One scheduler instance: the root queue or a sub-instance of it."""

    def __init__(
        self,
        engine: Engine,
        graph: ResourceGraph | None = None,
        ledger: FairShareLedger | None = None,
        *,
        alpha: float = 0.0,
        launch: LatencyModel | None = None,
        lost_job_policy: str = "requeue",
        backfill: bool = True,
        instance_id: str = ROOT,
        parent: Instance | None = None,
        granted: frozenset[int] | None = None,
        _ids: _IdCounter | None = None,
    ):
        if lost_job_policy not in ("requeue", "fail"):
            raise ValueError(f"lost_job_policy must be requeue or fail, not {lost_job_policy!r}")
        self.engine = engine
        self.graph = graph if graph is not None else ResourceGraph()
        self.ledger = ledger if ledger is not None else FairShareLedger()
        self.alpha = alpha
        self.launch = launch or LatencyModel.constant(0.0, "launch")
        self.lost_job_policy = lost_job_policy
        # False: a blocked job holds back everything behind it (strict order)
        self.backfill = backfill
        self.instance_id = instance_id
        self.parent = parent
        self.granted = granted
        self.children: dict[str, Instance] = {}
        self.jobs: dict[int, JobRecord] = {}
        self.paused = False
        self.live = True
        self._ids = _ids or _IdCounter()
        self._runs: dict[int, _Run] = {}
        self._child_seq = 0
        # called after any state change the outside world may react to
        self.listeners: list[Callable[[str, JobRecord], None]] = []

    @property
    def next_job_id(self) -> int:
        return self._ids.next

    # resources

    def usable_ranks(self) -> list[int]:
        return sorted(
            r for r, res in self.graph.ranks.items()
            if res.schedulable and self.graph.owner_of(r) == self.instance_id
        )

    def free_ranks(self, job_id: int | None = None) -> list[int]:
        out = []
        for r in self.usable_ranks():
            res = self.graph.ranks[r]
            if res.job_id is None and (res.reserved_for is None or res.reserved_for == job_id):
                out.append(r)
        return out

    def capacity_for(self, spec: JobSpec, include_reserved: bool = False) -> int:
        """How many ranks of this instance could ever host one node of ``spec``, busy or not."""
        return sum(
            1 for r in self.usable_ranks()
            if self.graph.ranks[r].shape.cores >= spec.tasks_per_node
            and (include_reserved or self.graph.ranks[r].reserved_for is None)
        )

    # submission and lifecycle

    def submit(self, spec: JobSpec) -> JobRecord:
        if not self.live:
            raise RuntimeError(f"instance {self.instance_id} is released")
        errors = spec.errors()
        if errors:
            raise InvalidJob(["invalid_spec"], ", ".join(errors))
        self.ledger.register(spec.user)
        spec = spec.with_id(self._ids.take())
        record = JobRecord(spec=spec, submit_time=self.engine.now, instance_id=self.instance_id)
        self.jobs[spec.job_id] = record
        self.engine.record("job_submitted", job_id=spec.job_id, user=spec.user, nodes=spec.nodes,
                           tasks_per_node=spec.tasks_per_node, instance=self.instance_id)
        self._notify("submitted", record)
        return record

    def get(self, job_id: int) -> JobRecord:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(job_id) from None

    def pending(self) -> list[JobRecord]:
        return [j for j in self.jobs.values() if j.state is JobState.PENDING]

    def running(self) -> list[JobRecord]:
        return [j for j in self.jobs.values() if j.state is JobState.RUNNING]

    def priority_order(self, jobs: Iterable[JobRecord]) -> list[JobRecord]:
        now = self.engine.now
        return sorted(
            jobs,
            key=lambda j: (-fair_share_priority(j.spec.user, self.ledger, now), j.submit_time, j.job_id),
        )

    def schedule_cycle(self) -> list[JobRecord]:
        """Start every pending job that fits right now, in priority order."""
        if self.paused or not self.live:
            return []
        started = []
        for job in self.priority_order(self.pending()):
            spec = job.spec
            fits = [r for r in self.free_ranks(job.job_id) if self.graph.ranks[r].shape.cores >= spec.tasks_per_node]
            if len(fits) < spec.nodes:
                if not self.backfill:
                    break
                continue
            self._start(job, self.graph.allocate(job.job_id, fits[: spec.nodes], spec.tasks_per_node))
            started.append(job)
        return started

    def _start(self, job: JobRecord, allocation: frozenset[Slot]) -> None:
        now = self.engine.now
        job.transition(JobState.RUNNING)
        job.allocation = allocation
        if job.start_time is None:
            job.start_time = now
        full = wall_time_model(job.spec, allocation, self.alpha)
        job.wall_time = full
        run_start = now + self.engine.sample(self.launch)
        ticket = self.engine.schedule(
            run_start + full * job.remaining, "job_finished", self._finish, {"job_id": job.job_id}
        )
        self._runs[job.job_id] = _Run(ticket, run_start, full)
        self.engine.record("job_started", job_id=job.job_id, ranks=sorted(job.ranks_held),
                           wall_time=full, remaining=job.remaining)
        self._notify("started", job)

    def _stop_run(self, job: JobRecord, keep_progress: bool) -> None:
        run = self._runs.pop(job.job_id)
        self.engine.cancel(run.ticket)
        now = self.engine.now
        elapsed = max(0.0, now - run.run_start)
        if keep_progress:
            job.remaining = max(0.0, job.remaining - elapsed / run.full_wall)
        self.ledger.charge(job.spec.user, elapsed * len(job.ranks_held), now)

    def _finish(self, event: Event) -> None:
        job = self.jobs[event.payload["job_id"]]
        run = self._runs.pop(job.job_id)
        now = self.engine.now
        self.ledger.charge(job.spec.user, max(0.0, now - run.run_start) * len(job.ranks_held), now)
        job.transition(JobState.COMPLETED)
        job.remaining = 0.0
        job.end_time = now
        self.graph.release(job.allocation)
        job.allocation = frozenset()
        self._notify("finished", job)
        self.schedule_cycle()

    def cancel(self, job_id: int) -> JobRecord:
        job = self.get(job_id)
        if job.state is JobState.RUNNING:
            self._stop_run(job, keep_progress=True)
            self.graph.release(job.allocation)
            job.allocation = frozenset()
        job.transition(JobState.CANCELED)
        job.end_time = self.engine.now
        self.engine.record("job_canceled", job_id=job_id)
        self._notify("canceled", job)
        self.schedule_cycle()
        return job

    def ranks_lost(self, ranks: Iterable[int]) -> list[JobRecord]:
        """Brokers under these ranks went away; requeue or fail the jobs on them."""
        gone = set(ranks)
        hit = []
        for job in list(self.jobs.values()):
            if job.state not in (JobState.RUNNING, JobState.PAUSED) or not (job.ranks_held & gone):
                continue
            if job.state is JobState.RUNNING:
                self._stop_run(job, keep_progress=False)
            self.graph.release(job.allocation)
            job.allocation = frozenset()
            job.transition(JobState.PENDING)
            if self.lost_job_policy == "requeue":
                self.engine.record("job_requeued", job_id=job.job_id)
            else:
                job.transition(JobState.CANCELED)
                job.end_time = self.engine.now
                self.engine.record("job_failed", job_id=job.job_id)
            hit.append(job)
            self._notify("requeued" if job.state is JobState.PENDING else "canceled", job)
        for child in self.children.values():
            hit.extend(child.ranks_lost(gone))
        return hit

    # pause, save, restore

    def pause(self) -> None:
        """Stop starting jobs; running jobs freeze with their remaining work recorded."""
        self.paused = True
        for job in self.running():
            self._stop_run(job, keep_progress=True)
            job.transition(JobState.PAUSED)
            self.engine.record("job_paused", job_id=job.job_id, remaining=job.remaining)
        self.engine.record("queue_paused", instance=self.instance_id)

    def resume(self) -> None:
        self.paused = False
        for job in [j for j in self.jobs.values() if j.state is JobState.PAUSED]:
            if all(r in self.graph.ranks for r in job.ranks_held):
                self._start(job, job.allocation)
            else:
                self.graph.release(job.allocation)
                job.allocation = frozenset()
                job.transition(JobState.PENDING)
        self.engine.record("queue_resumed", instance=self.instance_id)
        self.schedule_cycle()

    def save_archive(self) -> ArchiveSnapshot:
        if not self.paused:
            raise QueueNotPaused(f"instance {self.instance_id} must be paused before saving")
        jobs = tuple(
            replace(j, allocation=frozenset())
            for j in sorted(self.jobs.values(), key=lambda j: j.job_id)
            if j.state not in TERMINAL_STATES
        )
        snap = ArchiveSnapshot(saved_at=self.engine.now, jobs=jobs, next_job_id=self._ids.next)
        self.engine.record("archive_saved", jobs=len(jobs), next_job_id=snap.next_job_id)
        return snap

    def restore_archive(self, snapshot: ArchiveSnapshot) -> list[JobRecord]:
        """Load a saved queue into this (possibly differently sized) instance.

        Every job comes back pending with its id, spec and remaining work
        intact; paused jobs pick up where they stopped once they fit again.
        """
        clash = sorted(set(self.jobs) & {j.job_id for j in snapshot.jobs})
        if clash:
            raise IdCollision(f"job ids already present: {clash}")
        restored = []
        for saved in snapshot.jobs:
            rec = JobRecord(
                spec=saved.spec,
                state=JobState.PENDING,
                submit_time=saved.submit_time,
                start_time=saved.start_time,
                remaining=saved.remaining,
                instance_id=self.instance_id,
            )
            self.ledger.register(rec.spec.user)
            self.jobs[rec.job_id] = rec
            restored.append(rec)
        self._ids.next = max(self._ids.next, snapshot.next_job_id)
        missing = sorted({j.job_id for j in snapshot.jobs} - set(self.jobs))
        self.engine.record("restore_audit", saved=len(snapshot.jobs), restored=len(restored), missing=missing)
        self.schedule_cycle()
        return restored

    # hierarchy

    def spawn_subinstance(self, ranks: Iterable[int]) -> Instance:
        wanted = sorted(set(ranks))
        free = set(self.free_ranks())
        bad = [r for r in wanted if r not in free or self.graph.ranks[r].reserved_for is not None]
        if bad or not wanted:
            raise SlotsUnavailable(f"ranks {bad or wanted} are not free in {self.instance_id}")
        self._child_seq += 1
        child = Instance(
            self.engine,
            self.graph,
            self.ledger,
            alpha=self.alpha,
            launch=self.launch,
            lost_job_policy=self.lost_job_policy,
            backfill=self.backfill,
            instance_id=f"{self.instance_id}.{self._child_seq}",
            parent=self,
            granted=frozenset(wanted),
            _ids=self._ids,
        )
        for r in wanted:
            self.graph.owner[r] = child.instance_id
        self.children[child.instance_id] = child
        self.engine.record("subinstance_spawned", instance=child.instance_id, parent=self.instance_id, ranks=wanted)
        return child

    def release(self) -> None:
        """Tear down a sub-instance and hand its ranks back to the parent."""
        if self.parent is None:
            raise RuntimeError("the root instance cannot be released")
        for child in list(self.children.values()):
            child.release()
        if self.running():
            raise SlotsUnavailable(f"instance {self.instance_id} still has running jobs")
        for job in self.pending():
            self.cancel(job.job_id)
        for r in self.granted:
            self.graph.owner[r] = self.parent.instance_id
        self.live = False
        del self.parent.children[self.instance_id]
        self.engine.record("subinstance_released", instance=self.instance_id)
        self.parent.schedule_cycle()

    def walk(self) -> Iterable[Instance]:
        yield self
        for child in self.children.values():
            yield from child.walk()

    def _notify(self, what: str, job: JobRecord) -> None:
        for fn in self.listeners:
            fn(what, job)


# archive file format

def write_archive(snapshot: ArchiveSnapshot) -> str:
    header = {"version": ARCHIVE_VERSION, "saved_at": snapshot.saved_at, "next_job_id": snapshot.next_job_id,
              "fields": list(ARCHIVE_FIELDS)}
    lines = [json.dumps(header)]
    for j in snapshot.jobs:
        s = j.spec
        row = {
            "job_id": s.job_id,
            "user": s.user,
            "nodes": s.nodes,
            "tasks_per_node": s.tasks_per_node,
            "work_units": s.work_units,
            "serial_fraction": s.serial_fraction,
            "burstable": s.burstable,
            "command": s.command,
            "state": j.state.value,
            "submit_time": j.submit_time,
            "start_time": j.start_time,
            "remaining": j.remaining,
        }
        lines.append(json.dumps([row[k] for k in ARCHIVE_FIELDS]))
    return "\n".join(lines) + "\n"


def read_archive(text: str) -> ArchiveSnapshot:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty archive")
    header = json.loads(lines[0])
    if header.get("version") != ARCHIVE_VERSION:
        raise ValueError(f"unsupported archive version {header.get('version')!r}")
    fields = header.get("fields", list(ARCHIVE_FIELDS))
    jobs = []
    for n, line in enumerate(lines[1:], start=2):
        values = json.loads(line)
        if len(values) != len(fields):
            raise ValueError(f"archive line {n}: expected {len(fields)} fields, got {len(values)}")
        row = dict(zip(fields, values))
        spec = JobSpec(
            job_id=row["job_id"],
            user=row["user"],
            nodes=row["nodes"],
            tasks_per_node=row["tasks_per_node"],
            work_units=row["work_units"],
            serial_fraction=row["serial_fraction"],
            burstable=row["burstable"],
            command=row["command"],
        )
        jobs.append(JobRecord(spec=spec, state=JobState(row["state"]), submit_time=row["submit_time"],
                              start_time=row["start_time"], remaining=row["remaining"]))
    return ArchiveSnapshot(saved_at=header["saved_at"], jobs=tuple(jobs), next_job_id=header["next_job_id"])
