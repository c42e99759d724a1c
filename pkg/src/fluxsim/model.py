"""Domain types shared across the simulator.

Everything here is a plain value: constructors validate, nothing mutates
simulation state.  ``JobRecord`` is the one exception that carries mutable
lifecycle fields, and only the job queue is allowed to touch them.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field
from enum import Enum

DEFAULT_LEAD_PORT = 8050


class AuthMode(str, Enum):
    SINGLE_USER = "single_user"
    MULTI_USER = "multi_user"


class JobState(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    PAUSED = "paused"
    COMPLETED = "completed"
    CANCELED = "canceled"


# running/paused -> pending is the requeue path taken when a broker under a job is lost
_JOB_TRANSITIONS = {
    JobState.PENDING: {JobState.RUNNING, JobState.CANCELED},
    JobState.RUNNING: {JobState.COMPLETED, JobState.CANCELED, JobState.PAUSED, JobState.PENDING},
    JobState.PAUSED: {JobState.RUNNING, JobState.PENDING},
    JobState.COMPLETED: set(),
    JobState.CANCELED: set(),
}

TERMINAL_STATES = frozenset({JobState.COMPLETED, JobState.CANCELED})


class ValidationError(ValueError):
    """Raised when a value violates its invariants.

    ``codes`` names every violated invariant, not just the first one.
    """

    def __init__(self, codes: list[str], detail: str = ""):
        self.codes = list(codes)
        msg = ", ".join(self.codes)
        super().__init__(f"{msg}: {detail}" if detail else msg)


class InvalidTransition(RuntimeError):
    pass


@dataclass(frozen=True)
class ResourceShape:
    sockets: int
    cores_per_socket: int
    memory_mb: int

    def __post_init__(self):
        for name in ("sockets", "cores_per_socket", "memory_mb"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValidationError(["invalid_shape"], f"{name}={value!r}")

    @property
    def cores(self) -> int:
        return self.sockets * self.cores_per_socket


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    hostname: str
    shape: ResourceShape


def hash_password(password: str, salt: bytes | None = None) -> str:
    """Salted sha256 digest in ``salt$hexdigest`` form."""
    salt = os.urandom(8) if salt is None else salt
    digest = hashlib.sha256(salt + password.encode()).hexdigest()
    return f"{salt.hex()}${digest}"


def check_password(password: str, stored: str) -> bool:
    salt_hex, _, digest = stored.partition("$")
    try:
        salt = bytes.fromhex(salt_hex)
    except ValueError:
        return False
    expected = hashlib.sha256(salt + password.encode()).hexdigest()
    return hmac.compare_digest(expected, digest)


@dataclass(frozen=True)
class MiniClusterSpec:
    name: str
    size: int
    max_size: int
    pod_resources: ResourceShape = field(default_factory=lambda: ResourceShape(1, 1, 1024))
    entry_command: str = ""
    interactive: bool = False
    auth_mode: AuthMode = AuthMode.SINGLE_USER
    # (username, salted password hash)
    users: tuple[tuple[str, str], ...] = ()
    lead_port: int = DEFAULT_LEAD_PORT

    def with_size(self, size: int) -> MiniClusterSpec:
        return MiniClusterSpec(
            name=self.name,
            size=size,
            max_size=self.max_size,
            pod_resources=self.pod_resources,
            entry_command=self.entry_command,
            interactive=self.interactive,
            auth_mode=self.auth_mode,
            users=self.users,
            lead_port=self.lead_port,
        )


def spec_errors(spec: MiniClusterSpec) -> list[str]:
    errors = []
    if not (1 <= spec.size <= spec.max_size):
        errors.append("size_out_of_bounds")
    if not spec.name:
        errors.append("empty_name")
    if AuthMode(spec.auth_mode) is AuthMode.MULTI_USER and not spec.users:
        errors.append("missing_users")
    return errors


def validate_spec(spec: MiniClusterSpec) -> None:
    """Raise ValidationError naming every violated invariant; return None if ok."""
    errors = spec_errors(spec)
    if errors:
        raise ValidationError(errors, f"minicluster {spec.name!r}")


def hostname_for(name: str, rank: int) -> str:
    return f"{name}-{rank}"


@dataclass(frozen=True)
class ClusterConfig:
    """Read-only broker configuration shared by every pod.

    ``ranked_hosts`` always has ``max_size`` entries; ranks past the current
    size are registered but have no pod behind them.
    """

    ranked_hosts: tuple[str, ...]
    secret: bytes
    lead_port: int
    entry_command: str = ""

    def __post_init__(self):
        if not self.ranked_hosts:
            raise ValidationError(["empty_host_list"])
        if len(set(self.ranked_hosts)) != len(self.ranked_hosts):
            raise ValidationError(["duplicate_hostname"])

    @property
    def lead_hostname(self) -> str:
        return self.ranked_hosts[0]

    @property
    def max_size(self) -> int:
        return len(self.ranked_hosts)

    @classmethod
    def from_spec(cls, spec: MiniClusterSpec, secret: bytes) -> ClusterConfig:
        hosts = tuple(hostname_for(spec.name, r) for r in range(spec.max_size))
        return cls(ranked_hosts=hosts, secret=secret, lead_port=spec.lead_port, entry_command=spec.entry_command)


@dataclass(frozen=True)
class JobSpec:
    job_id: int | None
    user: str
    nodes: int
    tasks_per_node: int = 1
    work_units: float = 1.0
    serial_fraction: float = 0.0
    burstable: bool = False
    command: str = ""

    @property
    def ranks(self) -> int:
        return self.nodes * self.tasks_per_node

    def errors(self) -> list[str]:
        errs = []
        if not isinstance(self.nodes, int) or self.nodes < 1:
            errs.append("nodes")
        if not isinstance(self.tasks_per_node, int) or self.tasks_per_node < 1:
            errs.append("tasks_per_node")
        if not self.work_units > 0:
            errs.append("work_units")
        if not 0.0 <= self.serial_fraction <= 1.0:
            errs.append("serial_fraction")
        if not self.user:
            errs.append("user")
        return errs

    def with_id(self, job_id: int) -> JobSpec:
        return JobSpec(
            job_id=job_id,
            user=self.user,
            nodes=self.nodes,
            tasks_per_node=self.tasks_per_node,
            work_units=self.work_units,
            serial_fraction=self.serial_fraction,
            burstable=self.burstable,
            command=self.command,
        )


@dataclass(frozen=True)
class Slot:
    """Cores taken on one socket of one broker rank."""

    rank: int
    node_id: str
    socket: int
    cores: int


@dataclass
class JobRecord:
    spec: JobSpec
    state: JobState = JobState.PENDING
    submit_time: float = 0.0
    start_time: float | None = None
    end_time: float | None = None
    allocation: frozenset[Slot] = frozenset()
    # fraction of the job's total work still to do
    remaining: float = 1.0
    instance_id: str = "root"
    # modeled runtime on the most recent allocation
    wall_time: float | None = None

    @property
    def job_id(self) -> int:
        return self.spec.job_id

    @property
    def ranks_held(self) -> frozenset[int]:
        return frozenset(s.rank for s in self.allocation)

    def transition(self, new: JobState) -> None:
        if new not in _JOB_TRANSITIONS[self.state]:
            raise InvalidTransition(f"job {self.job_id}: {self.state.value} -> {new.value}")
        self.state = new


@dataclass(frozen=True)
class ArchiveSnapshot:
    saved_at: float
    jobs: tuple[JobRecord, ...]
    next_job_id: int

    def __post_init__(self):
        ids = [j.job_id for j in self.jobs]
        if len(ids) != len(set(ids)):
            raise ValidationError(["duplicate_job_id"])
        if any(j.state in TERMINAL_STATES for j in self.jobs):
            raise ValidationError(["terminal_job_in_archive"])
