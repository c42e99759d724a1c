"""Broker overlay: rank lookup, follower bootstrap with exponential retry,
shared-secret admission, and the lead's membership view.

Ranks come from the ranked host list in :class:`~fluxsim.model.ClusterConfig`.
Ranks with no pod behind them sit in ``down`` and simply come online when a
broker for them later connects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .engine import Engine, Event, LatencyModel
from .model import ClusterConfig

logger = logging.getLogger(__name__)


class UnknownHost(KeyError):
    pass


class BrokerPhase(str, Enum):
    DOWN = "down"
    CONNECTING = "connecting"
    ONLINE = "online"
    LOST = "lost"


@dataclass(frozen=True)
class RetryPolicy:
    base_interval: float = 0.1
    multiplier: float = 2.0
    cap: float = 30.0

    def __post_init__(self):
        if self.base_interval <= 0 or self.multiplier <= 1 or self.cap < self.base_interval:
            raise ValueError(f"bad retry policy {self}")

    def interval(self, attempt: int) -> float:
        return min(self.base_interval * self.multiplier**attempt, self.cap)


@dataclass(frozen=True)
class Topology:
    """Tree shape of the overlay; ``fanout=None`` means every follower hangs off rank 0."""

    fanout: int | None = None

    def __post_init__(self):
        if self.fanout is not None and self.fanout < 1:
            raise ValueError("fanout must be >= 1")

    def parent(self, rank: int) -> int | None:
        if rank == 0:
            return None
        if self.fanout is None:
            return 0
        return (rank - 1) // self.fanout


@dataclass(frozen=True)
class LeadAdvertisement:
    """Externally reachable address of the lead broker (NodePort-style)."""

    address: str
    port: int


@dataclass
class BrokerState:
    rank: int
    phase: BrokerPhase = BrokerPhase.DOWN
    retry_attempt: int = 0
    next_retry_at: float | None = None
    parent_rank: int | None = None
    hostname: str = ""
    secret: bytes = b""
    address: str | None = None
    auth_failures: int = 0
    _ticket: Event | None = None


def resolve_rank(hostname: str, config: ClusterConfig) -> int:
    """Position of ``hostname`` in the ranked host list.

    A namespaced name such as ``burst-0/cluster-9`` resolves by its last path
    component; the namespace only says where the broker physically lives.
    """
    bare = hostname.rsplit("/", 1)[-1]
    try:
        return config.ranked_hosts.index(bare)
    except ValueError:
        raise UnknownHost(hostname) from None


class Overlay:
    """Engine-owned broker state machines for one MiniCluster."""

    def __init__(
        self,
        engine: Engine,
        config: ClusterConfig,
        policy: RetryPolicy | None = None,
        topology: Topology | None = None,
        network: LatencyModel | None = None,
        max_auth_failures: int = 3,
        advertisement: LeadAdvertisement | None = None,
    ):
        self.engine = engine
        self.config = config
        self.policy = policy or RetryPolicy()
        self.topology = topology or Topology()
        self.network = network or LatencyModel.constant(0.0, "network")
        self.max_auth_failures = max_auth_failures
        self.advertisement = advertisement
        self.brokers = {
            r: BrokerState(rank=r, hostname=h, parent_rank=self.topology.parent(r))
            for r, h in enumerate(config.ranked_hosts)
        }
        self.on_online: list[Callable[[int], None]] = []
        self.on_offline: list[Callable[[int, BrokerPhase], None]] = []

    def phase(self, rank: int) -> BrokerPhase:
        return self.brokers[rank].phase

    def membership(self) -> dict[int, BrokerPhase]:
        """The lead's view: every configured rank and its phase."""
        return {r: b.phase for r, b in self.brokers.items()}

    def online_ranks(self) -> list[int]:
        return [r for r, b in self.brokers.items() if b.phase is BrokerPhase.ONLINE]

    def start_lead(self) -> None:
        """Rank 0 listens; it never connects anywhere."""
        lead = self.brokers[0]
        lead.secret = self.config.secret
        self._go_online(lead)

    def start_follower(self, rank: int, secret: bytes | None = None, address: str | None = None) -> None:
        """Begin bootstrap for ``rank``: first attempt now, then back off per policy.

        ``address`` is where the broker believes the lead lives; remote brokers
        use the advertised NodePort address, local ones the lead hostname.
        """
        if rank == 0:
            raise ValueError("rank 0 listens; use start_lead")
        b = self.brokers[rank]
        if b.phase in (BrokerPhase.CONNECTING, BrokerPhase.ONLINE):
            return
        b.phase = BrokerPhase.CONNECTING
        b.retry_attempt = 0
        b.auth_failures = 0
        b.secret = self.config.secret if secret is None else secret
        b.address = address
        self._schedule_attempt(b, self.engine.now)

    def stop(self, rank: int, lost: bool = False) -> None:
        """Broker exits (pod deleted) or vanishes (node crash)."""
        b = self.brokers[rank]
        self.engine.cancel(b._ticket)
        b._ticket = None
        b.next_retry_at = None
        was_online = b.phase is BrokerPhase.ONLINE
        b.phase = BrokerPhase.LOST if (lost and was_online) else BrokerPhase.DOWN
        self.engine.record("broker_" + b.phase.value, rank=rank)
        if was_online:
            for fn in self.on_offline:
                fn(rank, b.phase)
            self._orphan_children(rank)

    def mark_down(self, rank: int) -> None:
        """Lost ranks settle to down once their pod is gone for good."""
        b = self.brokers[rank]
        if b.phase is BrokerPhase.LOST:
            b.phase = BrokerPhase.DOWN

    def _orphan_children(self, rank: int) -> None:
        for child in self.brokers.values():
            if child.parent_rank == rank and child.phase is BrokerPhase.ONLINE:
                child.phase = BrokerPhase.DOWN
                for fn in self.on_offline:
                    fn(child.rank, BrokerPhase.DOWN)
                self._orphan_children(child.rank)
                self.start_follower(child.rank, child.secret, child.address)

    def _schedule_attempt(self, b: BrokerState, at: float) -> None:
        b.next_retry_at = at
        b._ticket = self.engine.schedule(
            at, "broker_connect_attempt", self._attempt, {"rank": b.rank, "attempt": b.retry_attempt}
        )

    def _parent_reachable(self, b: BrokerState) -> bool:
        parent = self.brokers[b.parent_rank]
        if parent.phase is not BrokerPhase.ONLINE:
            return False
        if b.parent_rank == 0 and b.address is not None:
            ad = self.advertisement
            return ad is not None and b.address == f"{ad.address}:{ad.port}"
        return True

    def _attempt(self, event: Event) -> None:
        b = self.brokers[event.payload["rank"]]
        if b.phase is not BrokerPhase.CONNECTING:
            return
        if self._parent_reachable(b):
            delay = self.engine.sample(self.network)
            b._ticket = self.engine.after(delay, "broker_handshake", self._handshake, {"rank": b.rank})
            return
        wait = self.policy.interval(b.retry_attempt)
        b.retry_attempt += 1
        self._schedule_attempt(b, self.engine.now + wait)

    def _handshake(self, event: Event) -> None:
        b = self.brokers[event.payload["rank"]]
        if b.phase is not BrokerPhase.CONNECTING:
            return
        if b.secret != self.config.secret:
            b.auth_failures += 1
            if b.auth_failures >= self.max_auth_failures:
                b.phase = BrokerPhase.DOWN
                b._ticket = None
                b.next_retry_at = None
                self.engine.record("broker_rejected", rank=b.rank, reason="secret_mismatch")
                return
            wait = self.policy.interval(b.retry_attempt)
            b.retry_attempt += 1
            self._schedule_attempt(b, self.engine.now + wait)
            return
        if not self._parent_reachable(b):
            # parent left while the handshake was in flight
            wait = self.policy.interval(b.retry_attempt)
            b.retry_attempt += 1
            self._schedule_attempt(b, self.engine.now + wait)
            return
        self._go_online(b)

    def _go_online(self, b: BrokerState) -> None:
        b.phase = BrokerPhase.ONLINE
        b._ticket = None
        b.next_retry_at = None
        self.engine.record("broker_online", rank=b.rank, attempts=b.retry_attempt)
        for fn in self.on_online:
            fn(b.rank)


class Role(str, Enum):
    LEAD = "lead"
    FOLLOWER = "follower"


@dataclass(frozen=True)
class RoleAssignment:
    rank: int
    role: Role
    # lead submits the entry command itself once every rank is online
    auto_submit: bool = False


def start_role(rank: int, config: ClusterConfig, interactive: bool = False) -> RoleAssignment:
    """Rank 0 runs the queue (and the entry command unless interactive); everyone else executes work."""
    if rank == 0:
        return RoleAssignment(0, Role.LEAD, auto_submit=bool(config.entry_command) and not interactive)
    if not 0 < rank < config.max_size:
        raise UnknownHost(f"rank {rank}")
    return RoleAssignment(rank, Role.FOLLOWER)
