"""Experiment harness: repetitions, per-rep metrics, aggregates and cost accounting."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import statistics
from dataclasses import astuple, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from .engine import Engine, Event, dump_log
from .minicluster import LeadNotReady, MiniCluster
from .model import TERMINAL_STATES, JobRecord, ValidationError
from .scenario import Scenario, TimedAction, TimedJob


@dataclass(frozen=True)
class MetricsRecord:
    scenario: str
    mode: str
    size: int
    rep: int
    seed: int
    ranks: int
    creation_time: float
    deletion_time: float
    launcher_time: float
    wall_time: float
    billed_nodes: int
    node_seconds_billed: float
    one_time_costs: float
    repeated_costs: float


CSV_HEADER = tuple(f.name for f in fields(MetricsRecord))
# columns averaged in the aggregate file
NUMERIC = ("creation_time", "deletion_time", "launcher_time", "wall_time", "billed_nodes",
           "node_seconds_billed", "one_time_costs", "repeated_costs")


@dataclass
class RunResult:
    records: list[MetricsRecord]
    log: list[dict]


def rep_seed(seed: int, size: int, rep: int) -> int:
    """Per-repetition seed; both topology modes of a rep share it."""
    digest = hashlib.sha256(f"{seed}:{size}:{rep}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class _Driver:
    """Feeds a scenario's timed jobs and actions into one MiniCluster."""

    def __init__(self, engine: Engine, cluster: MiniCluster, jobs: list[TimedJob], actions: list[TimedAction]):
        self.engine = engine
        self.cluster = cluster
        self.records: list[JobRecord] = []
        self.backlog: list[TimedJob] = []
        self.outstanding = len(jobs) + len(actions)
        self.jobs = list(jobs)
        for i, job in enumerate(self.jobs):
            engine.schedule(job.at, "submit_request", self._submit, {"index": i, "user": job.spec.user})
        for action in actions:
            engine.schedule(action.at, "action", self._act, {"op": action.op, "value": action.value})
        cluster.overlay.on_online.append(self._flush)

    def _submit(self, event: Event) -> None:
        job = self.jobs[event.payload["index"]]
        self.outstanding -= 1
        self.backlog.append(job)
        self._flush(0)

    def _flush(self, rank: int) -> None:
        if rank != 0 or self.cluster.queue is None or self.cluster.deleting:
            return
        waiting, self.backlog = self.backlog, []
        for job in waiting:
            try:
                self.records.append(self.cluster.submit(job.spec))
            except LeadNotReady:
                self.backlog.append(job)

    def _act(self, event: Event) -> None:
        self.outstanding -= 1
        op, value = event.payload["op"], event.payload["value"]
        c = self.cluster
        if op == "resize":
            try:
                c.request_resize(value, source="scenario")
            except ValidationError:
                pass
        elif op == "fail_pod":
            c.fail_pod(value)
        elif c.queue is not None:
            if op == "cancel":
                job = c.queue.jobs.get(value)
                if job is not None and job.state not in TERMINAL_STATES:
                    c.queue.cancel(value)
            elif op == "pause":
                c.queue.pause()
            elif op == "resume":
                c.queue.resume()

    def done(self) -> bool:
        c = self.cluster
        if self.outstanding or self.backlog or c.first_full_at is None:
            return False
        jobs = list(self.records)
        if c.entry_record is not None:
            jobs.append(c.entry_record)
        elif c.entry_job is not None and c.queue is not None and not c.spec.interactive:
            return False
        return all(j.state in TERMINAL_STATES for j in jobs) and c.is_full()


def run_once(scenario: Scenario, size: int, rep: int, mode: str = "embedded_lead",
             image_cache: set[str] | None = None) -> tuple[MetricsRecord, list[dict], MiniCluster]:
    seed = rep_seed(scenario.seed, size, rep)
    engine = Engine(seed)
    engine.context = {"scenario": scenario.name, "mode": mode, "size": size, "rep": rep}
    cluster = scenario.build(engine, size, mode, image_cache)
    driver = _Driver(engine, cluster, scenario.jobs, scenario.actions)
    cluster.start()
    engine.run_until(driver.done, deadline=scenario.max_time)
    if scenario.delete_after:
        cluster.delete()
        engine.run_until(lambda: cluster.deleted_at is not None, deadline=engine.now + scenario.max_time)
    costs = cost_report(engine.log)
    entry = cluster.entry_record
    nan = math.nan
    record = MetricsRecord(
        scenario=scenario.name,
        mode=mode,
        size=size,
        rep=rep,
        seed=seed,
        ranks=size * (scenario.entry_job.tasks_per_node if scenario.entry_job else 1),
        creation_time=cluster.first_full_at - cluster.reconcile_start if cluster.first_full_at is not None else nan,
        deletion_time=cluster.deleted_at - cluster.delete_started_at if cluster.deleted_at is not None else nan,
        launcher_time=entry.end_time - entry.submit_time if entry and entry.end_time is not None else nan,
        wall_time=entry.end_time - entry.start_time if entry and entry.end_time is not None else nan,
        billed_nodes=cluster.spec.size,
        node_seconds_billed=cluster.node_seconds(),
        one_time_costs=costs.one_time_total,
        repeated_costs=costs.repeated_total,
    )
    return record, engine.log, cluster


def run_scenario(scenario: Scenario, seed: int | None = None, reps: int | None = None,
                 modes: Iterable[str] | None = None) -> RunResult:
    """Every size x mode x rep of a scenario, run sequentially in a fixed order."""
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    reps = scenario.reps if reps is None else reps
    records, log = [], []
    # a node keeps a pulled image for the rest of the run
    image_cache: set[str] = set()
    for mode in modes or scenario.modes:
        for size in scenario.size_list():
            for rep in range(reps):
                record, rep_log, _ = run_once(scenario, size, rep, mode, image_cache)
                records.append(record)
                log.extend(rep_log)
    return RunResult(records, log)


def compare_topologies(scenario: Scenario, reps: int | None = None) -> list[tuple[MetricsRecord, MetricsRecord]]:
    """Pair each embedded_lead rep with the external_launcher rep on the same seed."""
    result = run_scenario(scenario, reps=reps, modes=("embedded_lead", "external_launcher"))
    by_key = {(r.mode, r.size, r.rep): r for r in result.records}
    return [
        (r, by_key[("external_launcher", r.size, r.rep)])
        for r in result.records
        if r.mode == "embedded_lead"
    ]


# output files


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def records_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def read_records_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def aggregate(records: Iterable[MetricsRecord]) -> list[dict]:
    """Mean and sample stddev per (scenario, mode, size); stddev of one rep is 0."""
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.scenario, r.mode, r.size), []).append(r)
    rows = []
    for (scenario, mode, size), group in groups.items():
        row = {"scenario": scenario, "mode": mode, "size": size, "reps": len(group)}
        for col in NUMERIC:
            values = [float(getattr(r, col)) for r in group if not math.isnan(float(getattr(r, col)))]
            row[f"{col}_mean"] = statistics.fmean(values) if values else math.nan
            row[f"{col}_std"] = statistics.stdev(values) if len(values) > 1 else (0.0 if values else math.nan)
        rows.append(row)
    return rows


def aggregate_csv(rows: list[dict]) -> str:
    header = ["scenario", "mode", "size", "reps"] + [f"{c}_{s}" for c in NUMERIC for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def write_outputs(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "aggregate": out / "aggregate.csv", "events": out / "events.jsonl"}
    paths["metrics"].write_text(records_csv(result.records))
    paths["aggregate"].write_text(aggregate_csv(aggregate(result.records)))
    paths["events"].write_text(dump_log(result.log))
    return paths


# cost accounting


@dataclass(frozen=True)
class CostEntry:
    kind: str
    seconds: float
    cause: str
    at: float
    rep: int | None = None


@dataclass
class CostReport:
    one_time: list[CostEntry] = field(default_factory=list)
    repeated: list[CostEntry] = field(default_factory=list)
    autoscaling: bool = False

    @property
    def one_time_total(self) -> float:
        return sum(e.seconds for e in self.one_time)

    @property
    def repeated_total(self) -> float:
        return sum(e.seconds for e in self.repeated)

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {"one_time": {}, "repeated": {}}
        for cls, entries in (("one_time", self.one_time), ("repeated", self.repeated)):
            for e in entries:
                out[cls][e.kind] = out[cls].get(e.kind, 0) + 1
        return out

    def table(self) -> str:
        counts = self.counts()
        kinds = sorted(set(counts["one_time"]) | set(counts["repeated"]))
        lines = [f"{'cost':<14}{'one_time':>10}{'seconds':>12}{'repeated':>10}{'seconds':>12}"]
        for k in kinds:
            ot = sum(e.seconds for e in self.one_time if e.kind == k)
            rp = sum(e.seconds for e in self.repeated if e.kind == k)
            lines.append(f"{k:<14}{counts['one_time'].get(k, 0):>10}{ot:>12.2f}"
                         f"{counts['repeated'].get(k, 0):>10}{rp:>12.2f}")
        lines.append(f"{'total':<14}{len(self.one_time):>10}{self.one_time_total:>12.2f}"
                     f"{len(self.repeated):>10}{self.repeated_total:>12.2f}")
        lines.append(f"autoscaling: {'on' if self.autoscaling else 'off'}")
        return "\n".join(lines)


def cost_report(log: Iterable[dict]) -> CostReport:
    """Split provisioning, image pull and burst costs into one-time and repeated.

    Work done to bring the cluster up for the first time is paid once; any
    pod created later (scale-up, recovery) or any burst pays again.
    """
    report = CostReport()
    for entry in log:
        kind, p = entry["kind"], entry["payload"]
        if kind == "scale_check":
            report.autoscaling = True
        if kind == "pod_create" and "cause" in p:
            item = CostEntry("provision", p["provision_seconds"], p["cause"], entry["time"], entry.get("rep"))
        elif kind == "image_pull":
            item = CostEntry("image_pull", p["seconds"], p["cause"], entry["time"], entry.get("rep"))
        elif kind == "burst_provisioning":
            item = CostEntry("burst", p["seconds"], "burst", entry["time"], entry.get("rep"))
        else:
            continue
        (report.one_time if item.cause == "initial" else report.repeated).append(item)
    return report
