"""Planning side of the operator control loop.

``reconcile`` is a pure function of the observed pods and the desired
state.  The MiniCluster applies the returned actions inside the event loop
and calls it again whenever a pod changes phase, until the plan is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping

from .model import MiniClusterSpec, NodeSpec, ResourceShape, ValidationError, spec_errors


class PodPhase(str, Enum):
    PENDING = "pending"
    CREATING = "creating"
    RUNNING = "running"
    TERMINATING = "terminating"
    GONE = "gone"


LIVE_PHASES = frozenset({PodPhase.PENDING, PodPhase.CREATING, PodPhase.RUNNING})


@dataclass
class PodInstance:
    index: int
    phase: PodPhase = PodPhase.PENDING
    node_id: str | None = None
    requested_at: float = 0.0
    created_at: float | None = None
    ready_at: float | None = None
    terminated_at: float | None = None


@dataclass(frozen=True)
class DesiredState:
    spec: MiniClusterSpec
    generation: int = 1

    @property
    def size(self) -> int:
        return self.spec.size


@dataclass(frozen=True)
class Action:
    op: str  # "create" | "terminate"
    index: int
    generation: int = 0


class ResizeRejected(ValidationError):
    pass


class Unschedulable(RuntimeError):
    pass


def _phase_map(observed: Iterable[PodInstance] | Mapping[int, PodInstance]) -> dict[int, PodPhase]:
    pods = observed.values() if isinstance(observed, Mapping) else observed
    phases: dict[int, PodPhase] = {}
    for pod in pods:
        if pod.index in phases:
            raise ValueError(f"two pods observed for index {pod.index}")
        phases[pod.index] = PodPhase(pod.phase)
    return phases


def reconcile(
    observed: Iterable[PodInstance] | Mapping[int, PodInstance],
    desired: DesiredState,
    batch_width: int | None = None,
) -> list[Action]:
    """Plan the creates and terminates that move the pod set toward ``desired.size``.

    Creates come in ascending index order.  With a finite ``batch_width`` no
    new batch starts while any pod is still pending or creating.  An index
    whose pod is terminating is left alone until that pod is gone.
    Terminates cover every live index >= size, highest first, so index 0
    is never planned for termination while the cluster exists.
    """
    phases = _phase_map(observed)
    size = desired.size
    gen = desired.generation

    kill = sorted((i for i, p in phases.items() if i >= size and p in LIVE_PHASES), reverse=True)
    missing = [i for i in range(size) if phases.get(i, PodPhase.GONE) is PodPhase.GONE]
    if batch_width is not None:
        in_flight = any(p in (PodPhase.PENDING, PodPhase.CREATING) for p in phases.values())
        missing = [] if in_flight else missing[:batch_width]
    return [Action("create", i, gen) for i in missing] + [Action("terminate", i, gen) for i in kill]


def plan_teardown(observed: Iterable[PodInstance] | Mapping[int, PodInstance]) -> list[Action]:
    """Delete the whole MiniCluster: every live pod, highest index first, so 0 goes last."""
    phases = _phase_map(observed)
    return [Action("terminate", i) for i in sorted((i for i, p in phases.items() if p in LIVE_PHASES), reverse=True)]


def request_resize(desired: DesiredState, new_size: int, reserved_ranks: Iterable[int] = ()) -> DesiredState:
    """Shared validation for every resize source (user patch, API, autoscaler).

    ``reserved_ranks`` are phantom ranks currently lent to a burst; growing the
    local pod set into them is refused.
    """
    if not isinstance(new_size, int) or isinstance(new_size, bool):
        raise ResizeRejected(["size_out_of_bounds"], f"size {new_size!r} is not an integer")
    errors = spec_errors(desired.spec.with_size(new_size))
    if "size_out_of_bounds" in errors:
        raise ResizeRejected(["size_out_of_bounds"], f"size {new_size} outside [1, {desired.spec.max_size}]")
    busy = sorted(r for r in reserved_ranks if r < new_size)
    if busy:
        raise ResizeRejected(["ranks_in_use"], f"ranks {busy} are held by a burst")
    return replace(desired, spec=desired.spec.with_size(new_size), generation=desired.generation + 1)


def assign_node(
    pod: PodInstance,
    catalog: list[NodeSpec],
    placements: Mapping[str, int],
    request: ResourceShape,
    anti_affinity: bool = True,
) -> str:
    """Pick a node for ``pod``.

    ``placements`` counts pods of this MiniCluster already on each node.  With
    anti-affinity a node hosts at most one of them; without it, pods are packed
    first-fit by requested cores and memory, the way the default scheduler
    slices a large host.
    """
    if not catalog:
        raise ValueError("empty node catalog")
    for node in catalog:
        n = placements.get(node.node_id, 0)
        if anti_affinity:
            if n == 0 and _fits(request, node.shape, 1):
                return node.node_id
        elif _fits(request, node.shape, n + 1):
            return node.node_id
    raise Unschedulable(f"no node can host pod {pod.index}")


def _fits(request: ResourceShape, host: ResourceShape, count: int) -> bool:
    return request.cores * count <= host.cores and request.memory_mb * count <= host.memory_mb


def discover_resources(pod: PodInstance, catalog: Iterable[NodeSpec]) -> ResourceShape:
    """What a hwloc-style probe inside the pod reports: the whole host, always."""
    if pod.node_id is None:
        raise ValueError(f"pod {pod.index} is not assigned to a node")
    for node in catalog:
        if node.node_id == pod.node_id:
            return node.shape
    raise KeyError(pod.node_id)
