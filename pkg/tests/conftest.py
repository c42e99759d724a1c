from __future__ import annotations

import pytest

from fluxsim.engine import Engine, LatencyModel
from fluxsim.minicluster import ClusterLatencies, MiniCluster
from fluxsim.model import MiniClusterSpec, NodeSpec, ResourceShape

BIG = ResourceShape(2, 48, 393216)


def catalog(n: int, shape: ResourceShape = BIG, prefix: str = "node") -> list[NodeSpec]:
    return [NodeSpec(f"{prefix}-{i}", f"{prefix}-{i}", shape) for i in range(n)]


def constant_latencies(create=1.0, delete=0.5, network=0.05, launch=0.0, stagger=0.0) -> ClusterLatencies:
    return ClusterLatencies(
        pod_create=LatencyModel.constant(create, "pod_create"),
        pod_delete=LatencyModel.constant(delete, "pod_delete"),
        network=LatencyModel.constant(network, "network"),
        job_launch=LatencyModel.constant(launch, "job_launch"),
        create_stagger=stagger,
    )


def make_cluster(size=4, max_size=8, nodes=None, seed=1, latencies=None, **kw) -> MiniCluster:
    spec_kw = {k: kw.pop(k) for k in ("entry_command", "interactive", "auth_mode", "users", "pod_resources") if k in kw}
    spec = MiniClusterSpec("flux", size, max_size, **spec_kw)
    return MiniCluster(
        Engine(seed),
        spec,
        catalog(max_size if nodes is None else nodes),
        latencies=latencies or constant_latencies(),
        **kw,
    )


def bring_up(cluster: MiniCluster, limit: float = 1000.0) -> float:
    cluster.start()
    return cluster.engine.run_until(lambda: cluster.full, deadline=limit)


def settle(cluster: MiniCluster, span: float = 200.0) -> None:
    """Run long enough for every in-flight pod and broker transition to land."""
    cluster.engine.run_until(deadline=cluster.engine.now + span)


@pytest.fixture
def up_cluster():
    c = make_cluster()
    bring_up(c)
    return c
