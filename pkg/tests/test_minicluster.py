import pytest

from fluxsim.engine import LatencyModel
from fluxsim.minicluster import ClusterLatencies, ImagePolicy, LeadNotReady
from fluxsim.model import JobSpec, JobState, ResourceShape
from fluxsim.overlay import BrokerPhase
from fluxsim.reconciler import PodPhase, ResizeRejected

from conftest import BIG, bring_up, constant_latencies, make_cluster, settle


def down_ranks(c):
    return sorted(r for r, p in c.membership().items() if p is BrokerPhase.DOWN)


def test_bring_up_time_with_constant_latencies():
    c = make_cluster(4, 8)
    # create 1.0 then one network hop for the followers
    assert bring_up(c) == pytest.approx(1.05)
    assert c.full and down_ranks(c) == [4, 5, 6, 7]
    assert sorted(c.graph.ranks) == [0, 1, 2, 3]


def test_creation_stagger_spreads_pod_starts():
    c = make_cluster(4, 4, latencies=constant_latencies(stagger=0.25))
    bring_up(c)
    starts = [r["time"] for r in c.engine.log if r["kind"] == "pod_create"]
    assert starts == pytest.approx([0, 0.25, 0.5, 0.75])


def test_elastic_resize_trace():
    c = make_cluster(2, 4)
    bring_up(c)
    traces = [down_ranks(c)]
    for size in (4, 1):
        c.request_resize(size)
        settle(c)
        traces.append(down_ranks(c))
    assert traces == [[2, 3], [], [1, 2, 3]]
    assert sorted(c.pods) == [0]


def test_phantom_ranks_do_not_block_jobs():
    c = make_cluster(2, 8)
    bring_up(c)
    job = c.submit(JobSpec(None, "u", 2, work_units=10))
    settle(c)
    assert job.state is JobState.COMPLETED


def test_resize_validation_shared_path():
    c = make_cluster(2, 4)
    bring_up(c)
    with pytest.raises(ResizeRejected):
        c.request_resize(5)
    with pytest.raises(ResizeRejected):
        c.request_resize(0)
    assert c.desired.size == 2 and c.desired.generation == 1
    kinds = [r["kind"] for r in c.engine.log]
    assert kinds.count("resize_rejected") == 2


def test_shrink_never_kills_the_lead_and_goes_descending():
    c = make_cluster(8, 8)
    bring_up(c)
    c.request_resize(1)
    settle(c)
    terms = [r["payload"]["index"] for r in c.engine.log if r["kind"] == "pod_terminating"]
    assert terms == [7, 6, 5, 4, 3, 2, 1]
    gone = {r["payload"]["index"]: r["time"] for r in c.engine.log if r["kind"] == "pod_terminated"}
    order = [gone[i] for i in sorted(gone)]
    assert order == sorted(order, reverse=True)


def test_delete_removes_index_zero_last():
    c = make_cluster(4, 4, latencies=ClusterLatencies(
        LatencyModel("c", 1.0, 0.5, "uniform"), LatencyModel("d", 1.0, 0.9, "uniform"),
        LatencyModel.constant(0.05)))
    bring_up(c)
    c.delete()
    settle(c)
    gone = [(r["time"], r["payload"]["index"]) for r in c.engine.log if r["kind"] == "pod_terminated"]
    assert gone[-1][1] == 0
    times = {i: t for t, i in gone}
    assert [times[i] for i in range(4)] == sorted(times.values(), reverse=True)
    assert c.deleted_at is not None and c.pods == {}


def test_resize_during_bring_up_discards_stale_plan():
    c = make_cluster(2, 8, latencies=ClusterLatencies(
        LatencyModel.constant(1.0), LatencyModel.constant(0.5), LatencyModel.constant(0.05),
        controller_delay=0.5))
    c.start()
    c.engine.run_until(deadline=0.1)
    c.request_resize(6)
    settle(c)
    assert c.full and sorted(c.pods) == list(range(6))
    assert any(r["kind"] == "actions_discarded" for r in c.engine.log)


def test_whole_host_discovery_double_counts_a_shared_node():
    # two pods on one 96-core node each see the whole host
    c = make_cluster(2, 2, nodes=1, anti_affinity=False, pod_resources=ResourceShape(1, 48, 1024))
    bring_up(c)
    pods = list(c.pods.values())
    assert {p.node_id for p in pods} == {"node-0"}
    discovered = sum(c.graph.ranks[r].shape.cores for r in c.graph.ranks)
    assert discovered == 2 * BIG.cores


def test_anti_affinity_leaves_extra_pods_pending():
    c = make_cluster(3, 3, nodes=2)
    c.start()
    settle(c)
    assert c.pods[2].phase is PodPhase.PENDING and not c.full
    c.request_resize(2)
    settle(c)
    assert c.full and 2 not in c.pods


def test_fail_pod_recovers_with_requeue():
    c = make_cluster(4, 4)
    bring_up(c)
    job = c.submit(JobSpec(None, "u", 4, work_units=400))
    c.engine.advance(c.engine.now + 10)
    c.fail_pod(2)
    assert job.state is JobState.PENDING
    assert c.membership()[2] is BrokerPhase.LOST
    settle(c, 500)
    assert c.membership()[2] is BrokerPhase.ONLINE
    assert job.state is JobState.COMPLETED
    causes = [r["payload"]["cause"] for r in c.engine.log if r["kind"] == "pod_create" and "cause" in r["payload"]]
    assert causes == ["initial"] * 4 + ["recovery"]


def test_fail_policy_cancels_job():
    c = make_cluster(2, 2, lost_job_policy="fail")
    bring_up(c)
    job = c.submit(JobSpec(None, "u", 2, work_units=400))
    c.fail_pod(1)
    assert job.state is JobState.CANCELED


def test_submit_before_lead_is_rejected():
    c = make_cluster(2, 2)
    with pytest.raises(LeadNotReady):
        c.submit(JobSpec(None, "u", 1))
    with pytest.raises(LeadNotReady):
        c.metrics()


def test_entry_job_auto_submits_once_full():
    entry = JobSpec(None, "flux", 4, 2, work_units=80)
    c = make_cluster(4, 4, entry_job=entry, entry_command="lmp")
    bring_up(c)
    settle(c)
    assert c.entry_record.state is JobState.COMPLETED
    assert c.entry_record.start_time == pytest.approx(c.first_full_at)


def test_interactive_lead_does_not_auto_submit():
    c = make_cluster(2, 2, entry_job=JobSpec(None, "flux", 2), interactive=True, entry_command="lmp")
    bring_up(c)
    assert c.entry_record is None


def test_launcher_mode_keeps_rank_zero_free():
    c = make_cluster(3, 3, launcher_mode=True, entry_job=JobSpec(None, "flux", 2, work_units=10),
                     entry_command="lmp")
    bring_up(c)
    settle(c)
    assert c.entry_record.state is JobState.COMPLETED
    started = next(r for r in c.engine.log if r["kind"] == "job_started")
    assert started["payload"]["ranks"] == [1, 2]


def test_image_pull_cached_per_node():
    lat = ClusterLatencies(LatencyModel.constant(1.0), LatencyModel.constant(0.5), LatencyModel.constant(0.05),
                           image_pull=LatencyModel.constant(30.0))
    cache = set()
    first = make_cluster(2, 2, latencies=lat, image=ImagePolicy(pull=True), image_cache=cache)
    assert bring_up(first) == pytest.approx(31.05)
    second = make_cluster(2, 2, latencies=lat, image=ImagePolicy(pull=True), image_cache=cache)
    assert bring_up(second) == pytest.approx(1.05)


def test_node_seconds_cover_pod_lifetimes():
    c = make_cluster(2, 2)
    bring_up(c)
    c.engine.advance(10)
    c.delete()
    settle(c)
    # both pods requested at 0; teardown floors keep index 0 alive until 10.5
    assert c.node_seconds() == pytest.approx(21.0)


def test_lead_delay_pushes_follower_join():
    c = make_cluster(2, 2, lead_delay=1.0)
    # followers ready at 1.0 retry at 1.0, 1.1, 1.3, 1.7, 2.5; the lead is up at 2.0
    assert bring_up(c) == pytest.approx(2.55)
