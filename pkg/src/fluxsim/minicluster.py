"""One simulated MiniCluster: operator loop, pods, brokers and the lead's queue.

All mutation happens inside engine event handlers.  The public methods
(``request_resize``, ``submit``, ``fail_pod``, ``delete``) are meant to be
called from handlers or from commands posted to the engine.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .autoscaler import Autoscaler, ScalePolicy, queue_metric
from .burst import BurstManager, BurstPlugin, RemoteCluster, RemoteState
from .engine import Engine, Event, LatencyModel
from .jobqueue import FairShareLedger, Instance, ResourceGraph
from .model import ClusterConfig, JobRecord, JobSpec, MiniClusterSpec, NodeSpec, ResourceShape, ValidationError, validate_spec
from .overlay import BrokerPhase, LeadAdvertisement, Overlay, RetryPolicy, Topology, start_role
from .reconciler import (
    Action,
    DesiredState,
    PodInstance,
    PodPhase,
    ResizeRejected,
    Unschedulable,
    assign_node,
    discover_resources,
    plan_teardown,
    reconcile,
    request_resize,
)

logger = logging.getLogger(__name__)


class LeadNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterLatencies:
    pod_create: LatencyModel = LatencyModel.constant(0.0, "pod_create")
    pod_delete: LatencyModel = LatencyModel.constant(0.0, "pod_delete")
    network: LatencyModel = LatencyModel.constant(0.0, "network")
    image_pull: LatencyModel = LatencyModel.constant(0.0, "image_pull")
    job_launch: LatencyModel = LatencyModel.constant(0.0, "job_launch")
    # the job controller issues pod creations one after another
    create_stagger: float = 0.0
    # gap between planning a reconcile and applying it
    controller_delay: float = 0.0


@dataclass(frozen=True)
class ImagePolicy:
    pull: bool = False
    # once a node has the image it keeps it (the throwaway-run setup)
    cache: bool = True


@dataclass
class PodLifetime:
    index: int
    node_id: str | None
    requested_at: float
    gone_at: float


@dataclass
class MiniCluster:
    engine: Engine
    spec: MiniClusterSpec
    catalog: list[NodeSpec]
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    topology: Topology = field(default_factory=Topology)
    latencies: ClusterLatencies = field(default_factory=ClusterLatencies)
    anti_affinity: bool = True
    batch_width: int | None = None
    alpha: float = 0.0
    ledger: FairShareLedger = field(default_factory=FairShareLedger)
    lost_job_policy: str = "requeue"
    launcher_mode: bool = False
    entry_job: JobSpec | None = None
    image: ImagePolicy = field(default_factory=ImagePolicy)
    image_cache: set[str] = field(default_factory=set)
    lead_delay: float = 0.0
    max_auth_failures: int = 3
    scale_policy: ScalePolicy | None = None
    plugins: list[BurstPlugin] = field(default_factory=list)
    burst_check_interval: float = 5.0
    secret: bytes | None = None

    def __post_init__(self):
        validate_spec(self.spec)
        if self.secret is None:
            # generated by the controller before any pod exists
            self.secret = self.engine.rng.getrandbits(256).to_bytes(32, "big")
        self.config = ClusterConfig.from_spec(self.spec, self.secret)
        self.advertisement = LeadAdvertisement(f"{self.spec.name}-lead.nodeport", self.spec.lead_port)
        self.desired = DesiredState(self.spec, 1)
        self.pods: dict[int, PodInstance] = {}
        self.history: list[PodLifetime] = []
        self.graph = ResourceGraph()
        self.queue: Instance | None = None
        self.overlay = Overlay(
            self.engine, self.config, self.retry, self.topology, self.latencies.network,
            self.max_auth_failures, self.advertisement,
        )
        self.overlay.on_online.append(self._broker_online)
        self.overlay.on_offline.append(self._broker_offline)
        self.burst = BurstManager(self, list(self.plugins), self.burst_check_interval)
        self.autoscaler = (
            Autoscaler(
                self.engine, self.scale_policy, lambda: self.queue, lambda: self.desired.size,
                self.request_resize, self.busy_floor, self.spec.max_size,
            )
            if self.scale_policy is not None
            else None
        )
        self.remote_nodes: dict[int, tuple[NodeSpec, RemoteCluster]] = {}
        self.reconcile_start: float | None = None
        self.first_full_at: float | None = None
        self.delete_started_at: float | None = None
        self.deleted_at: float | None = None
        self.deleting = False
        self.full = False
        self.entry_record: JobRecord | None = None
        self.job_listeners: list[Callable[[str, JobRecord], None]] = []
        self.resize_log: list[tuple[float, int, str, bool]] = []
        self._kick_pending = False
        self._tickets: dict[int, Event] = {}
        self._failed: set[int] = set()
        self._unscheduled: list[int] = []

    # lifecycle

    def start(self) -> None:
        self.reconcile_start = self.engine.now
        self.engine.record("minicluster_created", name=self.spec.name, size=self.spec.size,
                           max_size=self.spec.max_size)
        self._kick()

    def delete(self) -> None:
        if self.deleting:
            return
        self.deleting = True
        self.delete_started_at = self.engine.now
        if self.autoscaler:
            self.autoscaler.stop()
        self.burst.stop()
        for remote in self.burst.remotes:
            if remote.state is not RemoteState.TORN_DOWN:
                for r in remote.ranks:
                    self.detach_remote_broker(r)
                remote.state = RemoteState.TORN_DOWN
                remote.torn_down_at = self.engine.now
                for p in self.burst.plugins:
                    if p.name == remote.plugin and remote in p.provisioned:
                        p.teardown(remote)
        self.engine.record("minicluster_delete", name=self.spec.name)
        self._kick()

    def request_resize(self, new_size: int, source: str = "user") -> DesiredState:
        """The single resize path shared by users, the REST API and the autoscaler."""
        try:
            if self.deleting:
                raise ResizeRejected(["deleting"], "minicluster is being deleted")
            new = request_resize(self.desired, new_size, self.burst.live_ranks())
        except ValidationError as exc:
            self.resize_log.append((self.engine.now, new_size, source, False))
            self.engine.record("resize_rejected", size=new_size, source=source, codes=list(exc.codes))
            raise
        old = self.desired.size
        self.desired = new
        self.resize_log.append((self.engine.now, new_size, source, True))
        self.engine.record("resize_accepted", old=old, size=new_size, source=source, generation=new.generation)
        self._kick()
        return new

    def fail_pod(self, index: int) -> None:
        """Node crash under pod ``index``: the pod vanishes and its broker is lost."""
        pod = self.pods.get(index)
        if pod is None or pod.phase not in (PodPhase.CREATING, PodPhase.RUNNING):
            return
        self.engine.cancel(self._tickets.pop(index, None))
        self.engine.record("pod_failed", index=index, node=pod.node_id)
        self._failed.add(index)
        self.overlay.stop(index, lost=True)
        self._gone(pod)
        self._kick()

    def submit(self, spec: JobSpec) -> JobRecord:
        if self.queue is None or self.overlay.phase(0) is not BrokerPhase.ONLINE:
            raise LeadNotReady("lead broker is not online")
        record = self.queue.submit(spec)
        self.queue.schedule_cycle()
        return record

    # observation

    def membership(self) -> dict[int, BrokerPhase]:
        return self.overlay.membership()

    def metrics(self):
        if self.queue is None:
            raise LeadNotReady("lead broker is not online")
        return queue_metric(self.queue, self.desired.size)

    def busy_floor(self) -> int:
        """Smallest size that keeps every running job's local ranks."""
        if self.queue is None:
            return 1
        held = [r for j in self.queue.running() for r in j.ranks_held if r not in self.remote_nodes]
        return max(held, default=0) + 1

    def is_full(self) -> bool:
        return all(self.overlay.phase(r) is BrokerPhase.ONLINE for r in range(self.desired.size))

    def node_seconds(self) -> float:
        return sum(p.gone_at - p.requested_at for p in self.history)

    # reconcile loop

    def _kick(self) -> None:
        if not self._kick_pending:
            self._kick_pending = True
            self.engine.after(0.0, "reconcile", self._reconcile, silent=True)

    def _reconcile(self, event: Event) -> None:
        self._kick_pending = False
        if self.deleting:
            actions = plan_teardown(self.pods)
        else:
            actions = reconcile(self.pods, self.desired, self.batch_width)
        if not actions:
            return
        gen = self.desired.generation
        self.engine.record("reconcile_plan", generation=gen,
                           create=[a.index for a in actions if a.op == "create"],
                           terminate=[a.index for a in actions if a.op == "terminate"])
        if self.latencies.controller_delay > 0:
            self.engine.after(self.latencies.controller_delay, "reconcile_apply", self._apply_event,
                              {"actions": actions, "generation": gen, "deleting": self.deleting}, silent=True)
        else:
            self._apply(actions, gen, self.deleting)

    def _apply_event(self, event: Event) -> None:
        self._apply(event.payload["actions"], event.payload["generation"], event.payload["deleting"])

    def _apply(self, actions: list[Action], generation: int, for_delete: bool) -> None:
        if for_delete != self.deleting or (not for_delete and generation != self.desired.generation):
            self.engine.record("actions_discarded", generation=generation, current=self.desired.generation)
            self._kick()
            return
        now = self.engine.now
        k = 0
        floor = now
        for action in actions:
            pod = self.pods.get(action.index)
            if action.op == "create":
                if pod is not None:
                    continue
                pod = PodInstance(action.index, PodPhase.PENDING, requested_at=now)
                self.pods[action.index] = pod
                self._tickets[action.index] = self.engine.schedule(
                    now + k * self.latencies.create_stagger, "pod_create", self._pod_create, {"index": action.index}
                )
                k += 1
            elif pod is not None and pod.phase in (PodPhase.PENDING, PodPhase.CREATING, PodPhase.RUNNING):
                floor = self._terminate(pod, floor)

    def _cause(self, index: int) -> str:
        if index in self._failed:
            return "recovery"
        return "initial" if self.first_full_at is None and self.desired.generation == 1 else "scale_up"

    def _pod_create(self, event: Event) -> None:
        index = event.payload["index"]
        pod = self.pods.get(index)
        if pod is None or pod.phase is not PodPhase.PENDING:
            return
        placements = Counter(p.node_id for p in self.pods.values() if p.node_id is not None)
        try:
            node_id = assign_node(pod, self.catalog, placements, self.spec.pod_resources, self.anti_affinity)
        except Unschedulable:
            event.payload["unschedulable"] = True
            if index not in self._unscheduled:
                self._unscheduled.append(index)
            return
        cause = self._cause(index)
        pod.node_id = node_id
        pod.phase = PodPhase.CREATING
        pod.created_at = self.engine.now
        provision = self.engine.sample(self.latencies.pod_create)
        event.payload.update(node=node_id, cause=cause, provision_seconds=provision)
        delay = provision
        if self.image.pull and not (self.image.cache and node_id in self.image_cache):
            pull = self.engine.sample(self.latencies.image_pull)
            self.image_cache.add(node_id)
            self.engine.record("image_pull", index=index, node=node_id, seconds=pull, cause=cause)
            delay += pull
        if index == 0:
            delay += self.lead_delay
        self._tickets[index] = self.engine.after(delay, "pod_created", self._pod_ready, {"index": index, "node": node_id})

    def _pod_ready(self, event: Event) -> None:
        index = event.payload["index"]
        pod = self.pods.get(index)
        if pod is None or pod.phase is not PodPhase.CREATING:
            return
        self._tickets.pop(index, None)
        pod.phase = PodPhase.RUNNING
        pod.ready_at = self.engine.now
        self._failed.discard(index)
        if index == 0:
            self.overlay.start_lead()
        else:
            self.overlay.start_follower(index)
        self._kick()

    def _terminate(self, pod: PodInstance, floor: float) -> float:
        self.engine.cancel(self._tickets.pop(pod.index, None))
        was_pending = pod.phase is PodPhase.PENDING
        pod.phase = PodPhase.TERMINATING
        if pod.index in self._unscheduled:
            self._unscheduled.remove(pod.index)
        if self.overlay.phase(pod.index) is not BrokerPhase.DOWN:
            self.overlay.stop(pod.index)
        delay = 0.0 if was_pending and pod.node_id is None else self.engine.sample(self.latencies.pod_delete)
        # higher indices are issued first and never outlive lower ones
        gone_at = max(floor, self.engine.now + delay)
        self.engine.record("pod_terminating", index=pod.index, node=pod.node_id)
        self._tickets[pod.index] = self.engine.schedule(gone_at, "pod_terminated", self._pod_gone, {"index": pod.index})
        return gone_at

    def _pod_gone(self, event: Event) -> None:
        pod = self.pods.get(event.payload["index"])
        if pod is None or pod.phase is not PodPhase.TERMINATING:
            return
        self._tickets.pop(pod.index, None)
        self._gone(pod)
        self._kick()

    def _gone(self, pod: PodInstance) -> None:
        pod.phase = PodPhase.GONE
        pod.terminated_at = self.engine.now
        self.history.append(PodLifetime(pod.index, pod.node_id, pod.requested_at, self.engine.now))
        del self.pods[pod.index]
        if pod.index not in self._failed:
            self.overlay.mark_down(pod.index)
        # a freed node may let an unschedulable pod in
        for index in list(self._unscheduled):
            waiting = self.pods.get(index)
            self._unscheduled.remove(index)
            if waiting is not None and waiting.phase is PodPhase.PENDING:
                self._tickets[index] = self.engine.after(0.0, "pod_create", self._pod_create, {"index": index})
        self._check_full()
        if self.deleting and not self.pods and self.deleted_at is None:
            self.deleted_at = self.engine.now
            self.engine.record("minicluster_deleted", name=self.spec.name,
                               deletion_time=self.deleted_at - self.delete_started_at)

    # broker callbacks

    def _rank_node(self, rank: int) -> tuple[str, ResourceShape, int | None]:
        if rank in self.remote_nodes:
            node, remote = self.remote_nodes[rank]
            return node.node_id, node.shape, remote.job_id
        pod = self.pods[rank]
        return pod.node_id, discover_resources(pod, self.catalog), None

    def _broker_online(self, rank: int) -> None:
        node_id, shape, reserved = self._rank_node(rank)
        if rank == 0:
            role = start_role(0, self.config, self.spec.interactive)
            if self.queue is None:
                self.queue = Instance(
                    self.engine, self.graph, self.ledger, alpha=self.alpha,
                    launch=self.latencies.job_launch, lost_job_policy=self.lost_job_policy,
                )
                self.queue.listeners.append(self._job_event)
            self._auto_submit = role.auto_submit
            if self.autoscaler is not None:
                self.autoscaler.start()
        self.graph.add_rank(rank, node_id, shape, reserved_for=reserved,
                            schedulable=not (self.launcher_mode and rank == 0))
        self.burst.broker_online(rank)
        self._check_full()
        if self.queue is not None:
            self.queue.schedule_cycle()

    def _check_full(self) -> None:
        if self.full or self.deleting or self.queue is None or not self.is_full():
            return
        self.full = True
        first = self.first_full_at is None
        self.engine.record("cluster_full", size=self.desired.size, first=first)
        if first:
            self.first_full_at = self.engine.now
            self.burst.start()
            if self._auto_submit and self.entry_job is not None:
                self.entry_record = self.queue.submit(self.entry_job)

    def _broker_offline(self, rank: int, phase: BrokerPhase) -> None:
        self.graph.remove_rank(rank)
        if rank < self.desired.size:
            self.full = False
        if self.queue is not None:
            self.queue.ranks_lost([rank])

    def _job_event(self, what: str, job: JobRecord) -> None:
        if what in ("finished", "canceled"):
            self.burst.job_done(job)
        for fn in self.job_listeners:
            fn(what, job)

    # burst hooks

    def attach_remote_broker(self, rank: int, node: NodeSpec, remote: RemoteCluster) -> None:
        self.remote_nodes[rank] = (node, remote)

    def detach_remote_broker(self, rank: int) -> None:
        if self.overlay.phase(rank) is not BrokerPhase.DOWN:
            self.overlay.stop(rank)
        self.remote_nodes.pop(rank, None)

    def local_pods(self) -> Iterable[PodInstance]:
        return self.pods.values()
