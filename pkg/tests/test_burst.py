import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxsim.burst import (
    BurstError,
    BurstInventory,
    LocalPlugin,
    MockPlugin,
    RemoteState,
    burst_check,
)
from fluxsim.engine import LatencyModel
from fluxsim.model import JobRecord, JobSpec, JobState, ResourceShape
from fluxsim.overlay import BrokerPhase
from fluxsim.reconciler import ResizeRejected

from conftest import bring_up, catalog, make_cluster, settle


def pending(job_id, nodes, burstable=True, tpn=1):
    return JobRecord(JobSpec(job_id, "u", nodes, tpn, burstable=burstable))


def test_check_bursts_only_burstable_unsatisfiable_jobs():
    jobs = [pending(1, 4), pending(2, 12, burstable=False), pending(3, 12), pending(4, 20)]
    plugin = MockPlugin(10)
    assignments, unplaced = burst_check(jobs, lambda spec: 8, [plugin], 32)
    assert [(j.job_id, p.name, n) for j, p, n in assignments] == [(3, "mock", 4)]
    assert [j.job_id for j in unplaced] == [4]


def test_check_respects_phantom_rank_budget():
    assignments, unplaced = burst_check([pending(1, 12)], lambda spec: 8, [MockPlugin(10)], 3)
    assert assignments == [] and [j.job_id for j in unplaced] == [1]


def test_plugins_decide_satisfiability():
    need = BurstInventory(nodes_needed=4, phantom_ranks_free=8)
    assert MockPlugin(4).is_satisfiable(JobSpec(1, "u", 8), need)
    assert not MockPlugin(3).is_satisfiable(JobSpec(1, "u", 8), need)
    assert not MockPlugin(8, ResourceShape(1, 4, 1)).is_satisfiable(JobSpec(1, "u", 8, 16), need)
    local = LocalPlugin(catalog(3, prefix="spare"))
    assert not local.is_satisfiable(JobSpec(1, "u", 8), need)
    assert LocalPlugin(catalog(4, prefix="spare")).is_satisfiable(JobSpec(1, "u", 8), need)


def test_selector_falls_through_to_second_plugin():
    jobs = [pending(1, 12)]
    assignments, _ = burst_check(jobs, lambda spec: 8, [MockPlugin(2), LocalPlugin(catalog(6, prefix="s"))], 32)
    assert assignments[0][1].name == "local"


def burst_cluster(size=4, max_size=16, plugins=None, **kw):
    c = make_cluster(size, max_size, plugins=plugins if plugins is not None else [MockPlugin(8)], **kw)
    bring_up(c)
    return c


def test_burst_runs_job_on_namespaced_remote_ranks():
    c = burst_cluster()
    before = c.membership()
    job = c.submit(JobSpec(None, "u", 8, work_units=100, burstable=True))
    c.engine.run_until(lambda: job.state is JobState.RUNNING, deadline=100)
    (remote,) = c.burst.remotes
    assert list(remote.ranks) == [4, 5, 6, 7]
    assert remote.hostnames == [f"burst-0/flux-{r}" for r in range(4, 8)]
    assert job.ranks_held == frozenset(range(8))
    c.engine.run_until(lambda: job.state is JobState.COMPLETED, deadline=1000)
    settle(c)
    assert remote.state is RemoteState.TORN_DOWN
    assert c.membership() == before
    assert c.burst.plugins[0].in_use == 0


def test_non_burstable_oversized_job_waits():
    c = burst_cluster()
    job = c.submit(JobSpec(None, "u", 8, burstable=False))
    settle(c, 500)
    assert job.state is JobState.PENDING and c.burst.remotes == []


def test_satisfiable_burstable_job_runs_locally():
    c = burst_cluster()
    job = c.submit(JobSpec(None, "u", 3, burstable=True))
    settle(c)
    assert job.state is JobState.COMPLETED and c.burst.remotes == []


def test_remote_ranks_are_held_for_the_triggering_job():
    c = burst_cluster(plugins=[MockPlugin(8, latency=LatencyModel.constant(2.0))])
    big = c.submit(JobSpec(None, "u", 6, work_units=1000, burstable=True))
    c.engine.run_until(lambda: c.burst.remotes and c.burst.remotes[0].state is RemoteState.JOINED, deadline=100)
    small = c.submit(JobSpec(None, "u", 1))
    assert not (small.ranks_held & set(c.burst.remotes[0].ranks))
    assert big.state is JobState.RUNNING


def test_wrong_secret_never_joins():
    c = burst_cluster(plugins=[MockPlugin(8, secret=b"not-the-cluster-secret")])
    job = c.submit(JobSpec(None, "u", 6, burstable=True))
    settle(c, 300)
    remote = c.burst.remotes[0]
    assert remote.state is RemoteState.PROVISIONING
    assert all(c.overlay.phase(r) is not BrokerPhase.ONLINE for r in remote.ranks)
    assert job.state is JobState.PENDING


def test_teardown_refuses_busy_ranks_and_repeats_are_noops():
    c = burst_cluster()
    c.burst.auto_teardown = False
    job = c.submit(JobSpec(None, "u", 6, work_units=100, burstable=True))
    c.engine.run_until(lambda: job.state is JobState.RUNNING, deadline=100)
    remote = c.burst.remotes[0]
    with pytest.raises(BurstError) as exc:
        c.burst.teardown(remote)
    assert exc.value.code == "busy_ranks"
    c.engine.run_until(lambda: job.state is JobState.COMPLETED, deadline=1000)
    c.burst.teardown(remote)
    c.burst.teardown(remote)
    kinds = [r["kind"] for r in c.engine.log]
    assert kinds.count("burst_teardown") == 1 and kinds.count("burst_teardown_noop") == 1


def test_insufficient_phantom_ranks():
    c = burst_cluster(max_size=6)
    job = c.submit(JobSpec(None, "u", 8, burstable=True))
    settle(c, 100)
    assert c.burst.remotes == [] and job.state is JobState.PENDING
    assert any(r["kind"] == "burst_unplaced" for r in c.engine.log)
    with pytest.raises(BurstError) as exc:
        c.burst.execute_burst(job, c.burst.plugins[0], 4)
    assert exc.value.code == "insufficient_phantom_ranks"


def test_resize_cannot_grow_into_burst_ranks():
    c = burst_cluster()
    job = c.submit(JobSpec(None, "u", 8, work_units=1000, burstable=True))
    c.engine.run_until(lambda: job.state is JobState.RUNNING, deadline=100)
    with pytest.raises(ResizeRejected) as exc:
        c.request_resize(6)
    assert exc.value.codes == ["ranks_in_use"]


def live_rank_sets_disjoint(c):
    seen = set(c.pods)
    for remote in c.burst.remotes:
        if remote.state is RemoteState.TORN_DOWN:
            continue
        ranks = set(remote.ranks)
        assert not (ranks & seen), "overlapping rank sets"
        seen |= ranks


def check_random_inventory(seed):
    """Bursts happen iff the job is burstable and too big locally; returns the number of bursts."""
    rng = random.Random(seed)
    size = rng.randint(2, 6)
    plugins = []
    for i in range(rng.randint(1, 3)):
        if rng.random() < 0.5:
            plugins.append(MockPlugin(rng.choice([0, 64]), name=f"mock{i}",
                                      latency=LatencyModel.constant(rng.uniform(0, 5))))
        else:
            plugins.append(LocalPlugin(catalog(rng.choice([0, 64]), prefix=f"spare{i}")))
    can_place = any(getattr(p, "capacity", None) or getattr(p, "reserve", None) for p in plugins)
    c = burst_cluster(size, 64, plugins)
    before = c.membership()
    c.engine.observe(lambda ev: live_rank_sets_disjoint(c))
    jobs = [c.submit(JobSpec(None, "u", rng.randint(1, 12), work_units=rng.uniform(1, 50),
                             burstable=rng.random() < 0.5)) for _ in range(rng.randint(1, 5))]
    settle(c, 5000)
    burst_jobs = {r.job_id for r in c.burst.remotes}
    for j in jobs:
        unsatisfiable = j.spec.nodes > size
        assert (j.job_id in burst_jobs) == (j.spec.burstable and unsatisfiable and can_place), j
        assert j.state is (JobState.PENDING if unsatisfiable and j.job_id not in burst_jobs else JobState.COMPLETED)
    assert all(r.state is RemoteState.TORN_DOWN for r in c.burst.remotes)
    assert c.membership() == before
    return len(c.burst.remotes)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_randomized_inventories(seed):
    check_random_inventory(seed)
