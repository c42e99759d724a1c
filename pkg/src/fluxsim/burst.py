"""Bursting burstable jobs onto remote clusters.

A remote cluster borrows phantom ranks (registered in the ranked host list
but with no local pod), brings up follower brokers under namespaced
hostnames, and those brokers join the primary lead through its advertised
address using the ordinary overlay bootstrap.  The ranks it joins with are
held for the job that triggered the burst.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Sequence

from .engine import Engine, Event, LatencyModel
from .model import ClusterConfig, JobRecord, JobSpec, JobState, NodeSpec, ResourceShape, hostname_for
from .overlay import BrokerPhase, LeadAdvertisement

if TYPE_CHECKING:
    from .minicluster import MiniCluster

logger = logging.getLogger(__name__)


class BurstError(RuntimeError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


class RemoteState(str, Enum):
    PROVISIONING = "provisioning"
    JOINED = "joined"
    TORN_DOWN = "torn_down"


@dataclass
class RemoteCluster:
    plugin: str
    burst_id: int
    ranks: range
    hostnames: list[str]
    nodes: list[NodeSpec]
    job_id: int | None = None
    secret: bytes | None = None
    state: RemoteState = RemoteState.PROVISIONING
    provisioned_at: float | None = None
    joined_at: float | None = None
    torn_down_at: float | None = None


@dataclass(frozen=True)
class BurstInventory:
    """What the primary cluster can offer a plugin for one job."""

    nodes_needed: int
    phantom_ranks_free: int


class BurstPlugin:
    """Base contract for a burst target.

    ``is_satisfiable`` is the plugin's own judgement; ``provision`` is only
    called for a job it said yes to.
    """

    name = "base"

    def __init__(self, latency: LatencyModel | None = None):
        self.latency = latency or LatencyModel.constant(0.0, f"{self.name}-provision")
        self.provisioned: list[RemoteCluster] = []
        self.teardowns = 0

    def is_satisfiable(self, job: JobSpec, inventory: BurstInventory) -> bool:
        raise NotImplementedError

    def provision(self, nodes: int, config: ClusterConfig, lead: LeadAdvertisement, burst_id: int,
                  ranks: range) -> RemoteCluster:
        raise NotImplementedError

    def teardown(self, remote: RemoteCluster) -> None:
        self.teardowns += 1


class MockPlugin(BurstPlugin):
    """Remote provider with a fixed node budget and a uniform node shape."""

    name = "mock"

    def __init__(self, capacity: int = 32, shape: ResourceShape | None = None, latency: LatencyModel | None = None,
                 secret: bytes | None = None, name: str | None = None):
        if name:
            self.name = name
        super().__init__(latency)
        self.capacity = capacity
        self.in_use = 0
        self.shape = shape or ResourceShape(2, 48, 393216)
        # a remote config carrying the wrong secret never gets admitted
        self.secret = secret

    def is_satisfiable(self, job: JobSpec, inventory: BurstInventory) -> bool:
        return (
            inventory.nodes_needed <= self.capacity - self.in_use
            and job.tasks_per_node <= self.shape.cores
        )

    def provision(self, nodes, config, lead, burst_id, ranks):
        if nodes > self.capacity - self.in_use:
            raise BurstError("capacity_exhausted", f"{self.name} has {self.capacity - self.in_use} nodes left")
        self.in_use += nodes
        hosts = [f"burst-{burst_id}/{config.ranked_hosts[r]}" for r in ranks]
        specs = [NodeSpec(f"{self.name}-{burst_id}-{i}", h, self.shape) for i, h in enumerate(hosts)]
        remote = RemoteCluster(self.name, burst_id, ranks, hosts, specs, secret=self.secret)
        self.provisioned.append(remote)
        return remote

    def teardown(self, remote):
        super().teardown(remote)
        self.in_use -= len(remote.ranks)


class LocalPlugin(BurstPlugin):
    """Bursts onto a reserve pool of spare nodes in the same datacenter."""

    name = "local"

    def __init__(self, reserve: Sequence[NodeSpec], latency: LatencyModel | None = None):
        super().__init__(latency)
        self.reserve = list(reserve)
        self.taken: dict[int, list[NodeSpec]] = {}

    def _free(self) -> list[NodeSpec]:
        used = {n.node_id for nodes in self.taken.values() for n in nodes}
        return [n for n in self.reserve if n.node_id not in used]

    def is_satisfiable(self, job, inventory):
        fitting = [n for n in self._free() if n.shape.cores >= job.tasks_per_node]
        return inventory.nodes_needed <= len(fitting)

    def provision(self, nodes, config, lead, burst_id, ranks):
        free = self._free()
        if nodes > len(free):
            raise BurstError("capacity_exhausted", f"local reserve has {len(free)} nodes")
        picked = free[:nodes]
        self.taken[burst_id] = picked
        hosts = [f"burst-{burst_id}/{config.ranked_hosts[r]}" for r in ranks]
        specs = [NodeSpec(n.node_id, h, n.shape) for n, h in zip(picked, hosts)]
        remote = RemoteCluster(self.name, burst_id, ranks, hosts, specs)
        self.provisioned.append(remote)
        return remote

    def teardown(self, remote):
        super().teardown(remote)
        self.taken.pop(remote.burst_id, None)


Selector = Callable[[JobSpec, BurstInventory, Sequence[BurstPlugin]], "BurstPlugin | None"]


def first_satisfiable(job: JobSpec, inventory: BurstInventory, plugins: Sequence[BurstPlugin]) -> BurstPlugin | None:
    for plugin in plugins:
        if plugin.is_satisfiable(job, inventory):
            return plugin
    return None


def locally_unsatisfiable(job: JobRecord, local_capacity: int) -> bool:
    return job.spec.nodes > local_capacity


def burst_check(
    pending: Sequence[JobRecord],
    local_capacity: Callable[[JobSpec], int],
    plugins: Sequence[BurstPlugin],
    phantom_ranks_free: int,
    selector: Selector = first_satisfiable,
    already: set[int] | frozenset[int] = frozenset(),
) -> tuple[list[tuple[JobRecord, BurstPlugin, int]], list[JobRecord]]:
    """Pick a plugin for each pending burstable job the local cluster can never fit.

    Returns ``(assignments, unplaced)`` where an assignment is
    ``(job, plugin, nodes_to_provision)`` and ``unplaced`` lists jobs that
    qualified but no plugin would take.
    """
    assignments, unplaced = [], []
    free = phantom_ranks_free
    for job in pending:
        if job.state is not JobState.PENDING or not job.spec.burstable or job.job_id in already:
            continue
        cap = local_capacity(job.spec)
        if not locally_unsatisfiable(job, cap):
            continue
        needed = job.spec.nodes - cap
        inventory = BurstInventory(nodes_needed=needed, phantom_ranks_free=free)
        plugin = selector(job.spec, inventory, plugins) if needed <= free else None
        if plugin is None:
            unplaced.append(job)
            continue
        assignments.append((job, plugin, needed))
        free -= needed
    return assignments, unplaced


@dataclass
class BurstManager:
    """Runs periodic burst checks for one MiniCluster and owns its remote clusters."""

    cluster: MiniCluster
    plugins: list[BurstPlugin] = field(default_factory=list)
    check_interval: float = 5.0
    selector: Selector = first_satisfiable
    auto_teardown: bool = True
    remotes: list[RemoteCluster] = field(default_factory=list)
    _ticket: Event | None = None
    _seq: int = 0
    _assigned: set[int] = field(default_factory=set)
    _reported: set[int] = field(default_factory=set)

    @property
    def engine(self) -> Engine:
        return self.cluster.engine

    def register(self, plugin: BurstPlugin) -> None:
        self.plugins.append(plugin)

    def start(self) -> None:
        if self.plugins and self._ticket is None:
            self._ticket = self.engine.after(self.check_interval, "burst_check", self._check, silent=True)

    def stop(self) -> None:
        self.engine.cancel(self._ticket)
        self._ticket = None

    def live_ranks(self) -> set[int]:
        return {r for rc in self.remotes if rc.state is not RemoteState.TORN_DOWN for r in rc.ranks}

    def phantom_free(self) -> list[int]:
        """Configured ranks with no local pod and no live remote broker."""
        occupied = set(self.cluster.pods) | self.live_ranks()
        floor = self.cluster.desired.size
        return [r for r in range(floor, self.cluster.config.max_size) if r not in occupied]

    def _check(self, event: Event) -> None:
        self._ticket = self.engine.after(self.check_interval, "burst_check", self._check, silent=True)
        self.check_now()

    def check_now(self) -> list[RemoteCluster]:
        inst = self.cluster.queue
        if inst is None:
            return []
        assignments, unplaced = burst_check(
            inst.priority_order(inst.pending()),
            lambda spec: inst.capacity_for(spec),
            self.plugins,
            len(self.phantom_free()),
            self.selector,
            self._assigned,
        )
        for job in unplaced:
            if job.job_id not in self._reported:
                self._reported.add(job.job_id)
                self.engine.record("burst_unplaced", job_id=job.job_id, reason="no_plugin_satisfiable")
        out = []
        for job, plugin, nodes in assignments:
            self.engine.record("burst_assigned", job_id=job.job_id, plugin=plugin.name, nodes=nodes)
            self._assigned.add(job.job_id)
            out.append(self.execute_burst(job, plugin, nodes))
        return out

    def _rank_range(self, nodes: int) -> range:
        free = self.phantom_free()
        for i in range(len(free) - nodes + 1):
            if free[i + nodes - 1] - free[i] == nodes - 1:
                return range(free[i], free[i] + nodes)
        raise BurstError(
            "insufficient_phantom_ranks",
            f"need {nodes} contiguous ranks, {len(free)} phantom ranks free below max_size {self.cluster.config.max_size}",
        )

    def execute_burst(self, job: JobRecord | None, plugin: BurstPlugin, nodes: int) -> RemoteCluster:
        """Provision ``nodes`` remote brokers for ``job`` on phantom ranks."""
        ranks = self._rank_range(nodes)
        self._seq += 1
        remote = plugin.provision(nodes, self.cluster.config, self.cluster.advertisement, self._seq - 1, ranks)
        remote.job_id = job.job_id if job is not None else None
        self.remotes.append(remote)
        delay = self.engine.sample(plugin.latency)
        self.engine.record("burst_provisioning", burst=remote.burst_id, plugin=plugin.name,
                           ranks=[ranks.start, ranks.stop - 1], job_id=remote.job_id, seconds=delay)
        self.engine.after(delay, "burst_provisioned", self._provisioned, {"burst": remote.burst_id})
        return remote

    def remote(self, burst_id: int) -> RemoteCluster:
        return next(r for r in self.remotes if r.burst_id == burst_id)

    def _provisioned(self, event: Event) -> None:
        remote = self.remote(event.payload["burst"])
        if remote.state is RemoteState.TORN_DOWN:
            return
        remote.provisioned_at = self.engine.now
        ad = self.cluster.advertisement
        for rank, node in zip(remote.ranks, remote.nodes):
            self.cluster.attach_remote_broker(rank, node, remote)
            self.cluster.overlay.start_follower(rank, secret=remote.secret, address=f"{ad.address}:{ad.port}")

    def broker_online(self, rank: int) -> None:
        for remote in self.remotes:
            if rank in remote.ranks and remote.state is RemoteState.PROVISIONING:
                if all(self.cluster.overlay.phase(r) is BrokerPhase.ONLINE for r in remote.ranks):
                    remote.state = RemoteState.JOINED
                    remote.joined_at = self.engine.now
                    self.engine.record("burst_joined", burst=remote.burst_id)

    def job_done(self, job: JobRecord) -> None:
        if not self.auto_teardown:
            return
        for remote in self.remotes:
            if remote.job_id == job.job_id and remote.state is not RemoteState.TORN_DOWN:
                try:
                    self.teardown(remote)
                except BurstError:
                    pass

    def teardown(self, remote: RemoteCluster) -> None:
        if remote.state is RemoteState.TORN_DOWN:
            logger.warning("burst %s already torn down", remote.burst_id)
            self.engine.record("burst_teardown_noop", burst=remote.burst_id)
            return
        inst = self.cluster.queue
        busy = [j.job_id for j in inst.running() if j.ranks_held & set(remote.ranks)] if inst else []
        if busy:
            raise BurstError("busy_ranks", f"jobs {busy} still run on burst {remote.burst_id}")
        for rank in remote.ranks:
            self.cluster.detach_remote_broker(rank)
        remote.state = RemoteState.TORN_DOWN
        remote.torn_down_at = self.engine.now
        for plugin in self.plugins:
            if plugin.name == remote.plugin and remote in plugin.provisioned:
                plugin.teardown(remote)
        self.engine.record("burst_teardown", burst=remote.burst_id)
