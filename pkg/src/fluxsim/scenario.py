"""Scenario files: one YAML document describing a cluster, its workload and the run.

Every key is listed in the README.  Loading validates the whole document
and reports the first problem with the line it sits on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .autoscaler import ScalePolicy
from .burst import BurstPlugin, LocalPlugin, MockPlugin
from .engine import Distribution, Engine, LatencyModel
from .jobqueue import FairShareLedger
from .minicluster import ClusterLatencies, ImagePolicy, MiniCluster
from .model import AuthMode, JobSpec, MiniClusterSpec, NodeSpec, ResourceShape, ValidationError, hash_password, spec_errors
from .overlay import RetryPolicy, Topology

MODES = ("embedded_lead", "external_launcher")
ACTIONS = ("resize", "fail_pod", "cancel", "pause", "resume")
_LATENCY_KEYS = ("pod_create", "pod_delete", "network", "image_pull", "job_launch")
_TOP_KEYS = {
    "name", "seed", "reps", "sizes", "modes", "nodes", "cluster", "entry_job", "jobs", "actions", "retry",
    "topology", "scale_policy", "plugins", "latency", "image", "alpha", "lost_job_policy", "fair_share", "run",
}


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.line = line
        self.message = message
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class TimedJob:
    at: float
    spec: JobSpec


@dataclass(frozen=True)
class TimedAction:
    at: float
    op: str
    value: int | None = None


@dataclass
class Scenario:
    name: str
    seed: int
    cluster: MiniClusterSpec
    catalog: list[NodeSpec]
    reps: int = 20
    sizes: tuple[int, ...] = ()
    modes: tuple[str, ...] = ("embedded_lead",)
    anti_affinity: bool = True
    batch_width: int | None = None
    lead_delay: float = 0.0
    entry_job: JobSpec | None = None
    jobs: list[TimedJob] = field(default_factory=list)
    actions: list[TimedAction] = field(default_factory=list)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    topology: Topology = field(default_factory=Topology)
    scale_policy: ScalePolicy | None = None
    plugins: list[dict] = field(default_factory=list)
    latencies: ClusterLatencies = field(default_factory=ClusterLatencies)
    image: ImagePolicy = field(default_factory=ImagePolicy)
    alpha: float = 0.0
    lost_job_policy: str = "requeue"
    half_life: float = 1000.0
    weights: dict[str, float] = field(default_factory=dict)
    max_time: float = 100_000.0
    delete_after: bool = True

    def size_list(self) -> tuple[int, ...]:
        return self.sizes or (self.cluster.size,)

    def build(self, engine: Engine, size: int, mode: str = "embedded_lead",
              image_cache: set[str] | None = None) -> MiniCluster:
        """A fresh MiniCluster for one repetition.

        In external_launcher mode the cluster gets one extra pod at rank 0
        that joins the overlay but takes no work.
        """
        launcher = mode == "external_launcher"
        pods = size + 1 if launcher else size
        spec = MiniClusterSpec(
            name=self.cluster.name,
            size=pods,
            max_size=max(self.cluster.max_size + (1 if launcher else 0), pods),
            pod_resources=self.cluster.pod_resources,
            entry_command=self.cluster.entry_command,
            interactive=self.cluster.interactive,
            auth_mode=self.cluster.auth_mode,
            users=self.cluster.users,
            lead_port=self.cluster.lead_port,
        )
        entry = None
        if self.entry_job is not None:
            entry = JobSpec(None, self.entry_job.user, size, self.entry_job.tasks_per_node,
                            self.entry_job.work_units, self.entry_job.serial_fraction, False, self.entry_job.command)
        return MiniCluster(
            engine,
            spec,
            list(self.catalog),
            retry=self.retry,
            topology=self.topology,
            latencies=self.latencies,
            anti_affinity=self.anti_affinity,
            batch_width=self.batch_width,
            alpha=self.alpha,
            ledger=FairShareLedger(self.half_life, dict(self.weights)),
            lost_job_policy=self.lost_job_policy,
            launcher_mode=launcher,
            entry_job=entry,
            image=self.image,
            image_cache=image_cache if image_cache is not None else set(),
            lead_delay=self.lead_delay,
            scale_policy=self.scale_policy,
            plugins=make_plugins(self.plugins),
        )


def make_plugins(configs: list[dict]) -> list[BurstPlugin]:
    out: list[BurstPlugin] = []
    for cfg in configs:
        latency = cfg.get("latency")
        if cfg["type"] == "mock":
            out.append(MockPlugin(
                capacity=cfg.get("capacity", 32),
                shape=cfg.get("shape"),
                latency=latency,
                secret=cfg.get("secret"),
                name=cfg.get("name"),
            ))
        else:
            shape = cfg.get("shape") or ResourceShape(2, 48, 393216)
            reserve = [NodeSpec(f"reserve-{i}", f"reserve-{i}", shape) for i in range(cfg.get("reserve", 0))]
            out.append(LocalPlugin(reserve, latency))
    return out


# loading


class _Doc:
    """Walks the parsed document while keeping a line number for every path."""

    def __init__(self, lines: dict[tuple, int], source: str):
        self.lines = lines
        self.source = source

    def fail(self, path: tuple, message: str):
        while path and path not in self.lines:
            path = path[:-1]
        raise ScenarioError(f"{'.'.join(map(str, path)) or 'document'}: {message}" if path else message,
                            self.lines.get(path), self.source)

    def get(self, obj: dict, path: tuple, key: str, types, default=..., *, positive=False, non_negative=False):
        if key not in obj or obj[key] is None and default is not ...:
            if default is ...:
                self.fail(path, f"missing required key {key!r}")
            return default
        value = obj[key]
        here = path + (key,)
        if isinstance(value, bool) and bool not in _as_tuple(types):
            self.fail(here, f"expected {_type_names(types)}, got a boolean")
        if not isinstance(value, types):
            self.fail(here, f"expected {_type_names(types)}, got {type(value).__name__}")
        if positive and not value > 0:
            self.fail(here, "must be positive")
        if non_negative and value < 0:
            self.fail(here, "must not be negative")
        return value

    def mapping(self, obj: Any, path: tuple, allowed: set[str] | None = None) -> dict:
        if not isinstance(obj, dict):
            self.fail(path, f"expected a mapping, got {type(obj).__name__}")
        if allowed is not None:
            extra = sorted(set(obj) - allowed)
            if extra:
                self.fail(path + (extra[0],), f"unknown key {extra[0]!r}")
        return obj


def _as_tuple(types) -> tuple:
    return types if isinstance(types, tuple) else (types,)


def _type_names(types) -> str:
    return " or ".join(t.__name__ for t in _as_tuple(types))


def _index_lines(node, path: tuple, out: dict) -> None:
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _index_lines(value, path + (key.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _index_lines(item, path + (i,), out)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            data = loader.construct_document(node) if node is not None else None
        finally:
            loader.dispose()
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ScenarioError(f"syntax error: {exc.problem}", mark.line + 1 if mark else None, source) from None
    lines: dict[tuple, int] = {}
    if node is not None:
        _index_lines(node, (), lines)
    doc = _Doc(lines, source)
    if data is None:
        raise ScenarioError("empty scenario", None, source)
    return _build(doc, doc.mapping(data, (), _TOP_KEYS))


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    return parse_scenario(p.read_text(), str(p))


def _latency(doc: _Doc, raw: Any, path: tuple, name: str) -> LatencyModel:
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        if raw < 0:
            doc.fail(path, "must not be negative")
        return LatencyModel.constant(float(raw), name)
    m = doc.mapping(raw, path, {"base", "jitter", "distribution"})
    dist = doc.get(m, path, "distribution", str, "constant")
    try:
        dist = Distribution(dist)
    except ValueError:
        doc.fail(path + ("distribution",), f"one of {[d.value for d in Distribution]}")
    return LatencyModel(
        name,
        float(doc.get(m, path, "base", (int, float), non_negative=True)),
        float(doc.get(m, path, "jitter", (int, float), 0.0, non_negative=True)),
        dist,
    )


def _shape(doc: _Doc, raw: Any, path: tuple) -> ResourceShape:
    m = doc.mapping(raw, path, {"sockets", "cores_per_socket", "memory_mb", "count", "prefix"})
    return ResourceShape(
        doc.get(m, path, "sockets", int, positive=True),
        doc.get(m, path, "cores_per_socket", int, positive=True),
        doc.get(m, path, "memory_mb", int, 1024, positive=True),
    )


def _catalog(doc: _Doc, raw: Any) -> list[NodeSpec]:
    groups = raw if isinstance(raw, list) else [raw]
    catalog = []
    for g, group in enumerate(groups):
        path = ("nodes", g) if isinstance(raw, list) else ("nodes",)
        shape = _shape(doc, group, path)
        prefix = doc.get(group, path, "prefix", str, f"node{g}" if isinstance(raw, list) else "node")
        for i in range(doc.get(group, path, "count", int, positive=True)):
            catalog.append(NodeSpec(f"{prefix}-{i}", f"{prefix}-{i}", shape))
    if len({n.node_id for n in catalog}) != len(catalog):
        doc.fail(("nodes",), "node ids collide; give each group a distinct prefix")
    return catalog


def _job(doc: _Doc, raw: Any, path: tuple, users: set[str] | None, timed: bool) -> tuple[float, JobSpec]:
    keys = {"user", "nodes", "tasks_per_node", "work_units", "serial_fraction", "burstable", "command"}
    m = doc.mapping(raw, path, keys | ({"at"} if timed else set()))
    at = float(doc.get(m, path, "at", (int, float), 0.0, non_negative=True)) if timed else 0.0
    user = doc.get(m, path, "user", str, "flux")
    if users is not None and user not in users:
        doc.fail(path + ("user",), f"unknown user {user!r}")
    spec = JobSpec(
        job_id=None,
        user=user,
        nodes=doc.get(m, path, "nodes", int, 1, positive=True),
        tasks_per_node=doc.get(m, path, "tasks_per_node", int, 1, positive=True),
        work_units=float(doc.get(m, path, "work_units", (int, float), 1.0, positive=True)),
        serial_fraction=float(doc.get(m, path, "serial_fraction", (int, float), 0.0, non_negative=True)),
        burstable=doc.get(m, path, "burstable", bool, False),
        command=doc.get(m, path, "command", str, ""),
    )
    if spec.errors():
        doc.fail(path, f"invalid job: {', '.join(spec.errors())}")
    return at, spec


def _build(doc: _Doc, d: dict) -> Scenario:
    name = doc.get(d, (), "name", str)
    seed = doc.get(d, (), "seed", int)
    reps = doc.get(d, (), "reps", int, 20, positive=True)

    c = doc.mapping(doc.get(d, (), "cluster", dict), ("cluster",), {
        "name", "size", "max_size", "pod_resources", "entry_command", "interactive", "auth_mode", "users",
        "lead_port", "anti_affinity", "batch_width", "lead_delay",
    })
    cp = ("cluster",)
    users_raw = doc.get(c, cp, "users", list, [])
    users = []
    for i, u in enumerate(users_raw):
        up = cp + ("users", i)
        um = doc.mapping(u, up, {"name", "password", "password_hash"})
        uname = doc.get(um, up, "name", str)
        if "password_hash" in um:
            users.append((uname, doc.get(um, up, "password_hash", str)))
        else:
            users.append((uname, hash_password(doc.get(um, up, "password", str))))
    auth_mode = doc.get(c, cp, "auth_mode", str, "single_user")
    if auth_mode not in {m.value for m in AuthMode}:
        doc.fail(cp + ("auth_mode",), f"one of {[m.value for m in AuthMode]}")
    try:
        pod_resources = _shape(doc, c["pod_resources"], cp + ("pod_resources",)) if "pod_resources" in c \
            else ResourceShape(1, 1, 1024)
    except ValidationError as exc:
        doc.fail(cp + ("pod_resources",), str(exc))
    size = doc.get(c, cp, "size", int)
    spec = MiniClusterSpec(
        name=doc.get(c, cp, "name", str, name),
        size=size,
        max_size=doc.get(c, cp, "max_size", int, size),
        pod_resources=pod_resources,
        entry_command=doc.get(c, cp, "entry_command", str, ""),
        interactive=doc.get(c, cp, "interactive", bool, False),
        auth_mode=AuthMode(auth_mode),
        users=tuple(users),
        lead_port=doc.get(c, cp, "lead_port", int, 8050, positive=True),
    )
    errors = spec_errors(spec)
    if errors:
        doc.fail(cp, f"invalid cluster: {', '.join(errors)}")

    sizes = tuple(doc.get(d, (), "sizes", list, []))
    for i, s in enumerate(sizes):
        if isinstance(s, bool) or not isinstance(s, int) or not 1 <= s <= spec.max_size:
            doc.fail(("sizes", i), f"size must be an integer in [1, {spec.max_size}]")
    modes = tuple(doc.get(d, (), "modes", list, ["embedded_lead"]))
    for i, m in enumerate(modes):
        if m not in MODES:
            doc.fail(("modes", i), f"unknown mode {m!r}; expected one of {list(MODES)}")

    catalog = _catalog(doc, doc.get(d, (), "nodes", (dict, list)))
    user_names = {u for u, _ in users} if users else None

    entry = None
    if "entry_job" in d:
        _, entry = _job(doc, d["entry_job"], ("entry_job",), user_names, timed=False)
        if not spec.entry_command:
            spec = MiniClusterSpec(spec.name, spec.size, spec.max_size, spec.pod_resources,
                                   entry.command or "run", spec.interactive, spec.auth_mode, spec.users, spec.lead_port)

    jobs = []
    for i, raw in enumerate(doc.get(d, (), "jobs", list, [])):
        at, job = _job(doc, raw, ("jobs", i), user_names, timed=True)
        jobs.append(TimedJob(at, job))

    actions = []
    for i, raw in enumerate(doc.get(d, (), "actions", list, [])):
        ap = ("actions", i)
        m = doc.mapping(raw, ap, {"at", *ACTIONS})
        ops = [k for k in ACTIONS if k in m]
        if len(ops) != 1:
            doc.fail(ap, f"exactly one of {list(ACTIONS)} per action")
        op = ops[0]
        value = None if op in ("pause", "resume") else doc.get(m, ap, op, int)
        actions.append(TimedAction(float(doc.get(m, ap, "at", (int, float), non_negative=True)), op, value))

    r = doc.mapping(doc.get(d, (), "retry", dict, {}), ("retry",), {"base_interval", "multiplier", "cap"})
    retry = RetryPolicy(
        float(doc.get(r, ("retry",), "base_interval", (int, float), 0.1, positive=True)),
        float(doc.get(r, ("retry",), "multiplier", (int, float), 2.0, positive=True)),
        float(doc.get(r, ("retry",), "cap", (int, float), 30.0, positive=True)),
    )
    t = doc.mapping(doc.get(d, (), "topology", dict, {}), ("topology",), {"fanout"})
    topology = Topology(doc.get(t, ("topology",), "fanout", int, None, positive=True))

    scale = None
    if d.get("scale_policy") is not None:
        sp = ("scale_policy",)
        s = doc.mapping(d["scale_policy"], sp, {
            "mode", "target", "tolerance", "check_interval", "stabilization_window", "min_size", "max_size", "enabled",
        })
        mode = doc.get(s, sp, "mode", str, "queue_depth")
        if mode not in ("queue_depth", "utilization"):
            doc.fail(sp + ("mode",), "one of ['queue_depth', 'utilization']")
        try:
            scale = ScalePolicy(
                mode=mode,
                target=float(doc.get(s, sp, "target", (int, float), 1.0)),
                tolerance=float(doc.get(s, sp, "tolerance", (int, float), 0.10)),
                check_interval=float(doc.get(s, sp, "check_interval", (int, float), 15.0)),
                stabilization_window=float(doc.get(s, sp, "stabilization_window", (int, float), 60.0)),
                min_size=doc.get(s, sp, "min_size", int, 1, positive=True),
                max_size=doc.get(s, sp, "max_size", int, None, positive=True),
                enabled=doc.get(s, sp, "enabled", bool, True),
            )
        except ValueError as exc:
            doc.fail(sp, str(exc))

    plugins = []
    for i, raw in enumerate(doc.get(d, (), "plugins", list, [])):
        pp = ("plugins", i)
        m = doc.mapping(raw, pp, {"type", "name", "capacity", "reserve", "latency", "shape", "secret"})
        kind = doc.get(m, pp, "type", str)
        if kind not in ("mock", "local"):
            doc.fail(pp + ("type",), f"unknown plugin {kind!r}; expected mock or local")
        cfg: dict[str, Any] = {"type": kind}
        if kind == "mock":
            cfg["capacity"] = doc.get(m, pp, "capacity", int, 32, non_negative=True)
            cfg["name"] = doc.get(m, pp, "name", str, None)
            if "secret" in m:
                cfg["secret"] = doc.get(m, pp, "secret", str).encode()
        else:
            cfg["reserve"] = doc.get(m, pp, "reserve", int, 0, non_negative=True)
        if "shape" in m:
            cfg["shape"] = _shape(doc, m["shape"], pp + ("shape",))
        if "latency" in m:
            cfg["latency"] = _latency(doc, m["latency"], pp + ("latency",), f"{kind}-provision")
        plugins.append(cfg)

    lat = doc.mapping(doc.get(d, (), "latency", dict, {}), ("latency",),
                      {*_LATENCY_KEYS, "create_stagger", "controller_delay"})
    models = {k: _latency(doc, lat[k], ("latency", k), k) for k in _LATENCY_KEYS if k in lat}
    latencies = ClusterLatencies(
        **models,
        create_stagger=float(doc.get(lat, ("latency",), "create_stagger", (int, float), 0.0, non_negative=True)),
        controller_delay=float(doc.get(lat, ("latency",), "controller_delay", (int, float), 0.0, non_negative=True)),
    )
    im = doc.mapping(doc.get(d, (), "image", dict, {}), ("image",), {"pull", "cache"})
    image = ImagePolicy(doc.get(im, ("image",), "pull", bool, False), doc.get(im, ("image",), "cache", bool, True))

    lost = doc.get(d, (), "lost_job_policy", str, "requeue")
    if lost not in ("requeue", "fail"):
        doc.fail(("lost_job_policy",), "one of ['requeue', 'fail']")
    fs = doc.mapping(doc.get(d, (), "fair_share", dict, {}), ("fair_share",), {"half_life", "weights"})
    weights = doc.mapping(doc.get(fs, ("fair_share",), "weights", dict, {}), ("fair_share", "weights"))
    for user, w in weights.items():
        if isinstance(w, bool) or not isinstance(w, (int, float)) or w <= 0:
            doc.fail(("fair_share", "weights", user), "weight must be a positive number")
        if user_names is not None and user not in user_names:
            doc.fail(("fair_share", "weights", user), f"unknown user {user!r}")
    run = doc.mapping(doc.get(d, (), "run", dict, {}), ("run",), {"max_time", "delete_after"})

    return Scenario(
        name=name,
        seed=seed,
        cluster=spec,
        catalog=catalog,
        reps=reps,
        sizes=sizes,
        modes=modes,
        anti_affinity=doc.get(c, cp, "anti_affinity", bool, True),
        batch_width=doc.get(c, cp, "batch_width", int, None, positive=True),
        lead_delay=float(doc.get(c, cp, "lead_delay", (int, float), 0.0, non_negative=True)),
        entry_job=entry,
        jobs=jobs,
        actions=actions,
        retry=retry,
        topology=topology,
        scale_policy=scale,
        plugins=plugins,
        latencies=latencies,
        image=image,
        alpha=float(doc.get(d, (), "alpha", (int, float), 0.0, non_negative=True)),
        lost_job_policy=lost,
        half_life=float(doc.get(fs, ("fair_share",), "half_life", (int, float), 1000.0, positive=True)),
        weights={u: float(w) for u, w in weights.items()},
        max_time=float(doc.get(run, ("run",), "max_time", (int, float), 100_000.0, positive=True)),
        delete_after=doc.get(run, ("run",), "delete_after", bool, True),
    )
