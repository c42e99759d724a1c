"""REST surface of the lead broker.

``TenancyApi.handle`` is transport-free: it takes an ``ApiRequest`` and
returns an ``ApiResponse``.  Every request, reads included, is turned into a
command on the engine's queue so it observes the simulation at a single
point between events.  ``serve`` wraps the same handler in a local HTTP
server for demos.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import re
import secrets
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from .jobqueue import InvalidJob, UnknownJob
from .minicluster import LeadNotReady, MiniCluster
from .model import TERMINAL_STATES, AuthMode, JobRecord, JobSpec, ValidationError, check_password

logger = logging.getLogger(__name__)

DEFAULT_TTL = 3600.0
# identity used for every request when no users are configured
ANONYMOUS = "flux"
_JOB_FIELDS = {"nodes", "tasks_per_node", "work_units", "serial_fraction", "burstable", "command"}
_JOB_PATH = re.compile(r"^/v1/jobs/([^/]+)$")


class ApiError(Exception):
    def __init__(self, status: int, code: str, detail: str = ""):
        self.status = status
        self.code = code
        self.detail = detail
        super().__init__(f"{status} {code}")


@dataclass(frozen=True)
class AuthToken:
    token: str
    user: str
    issued_at: float
    expires_at: float


@dataclass
class ApiRequest:
    method: str
    path: str
    headers: dict[str, str] = field(default_factory=dict)
    body: Any = None


@dataclass
class ApiResponse:
    status: int
    body: dict


def basic_credentials(user: str, password: str) -> str:
    return "Basic " + base64.b64encode(f"{user}:{password}".encode()).decode()


def bearer(token: str) -> str:
    return f"Bearer {token}"


class TokenStore:
    """Opaque expiring tokens checked against the simulated clock."""

    def __init__(self, clock: Callable[[], float], ttl: float = DEFAULT_TTL):
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        self.clock = clock
        self.ttl = ttl
        self._tokens: dict[str, AuthToken] = {}

    def issue(self, user: str) -> AuthToken:
        now = self.clock()
        tok = AuthToken(secrets.token_urlsafe(24), user, now, now + self.ttl)
        self._tokens[tok.token] = tok
        return tok

    def check(self, token: str) -> str:
        tok = self._tokens.get(token)
        if tok is None:
            raise ApiError(401, "invalid_token")
        if not self.clock() < tok.expires_at:
            del self._tokens[token]
            raise ApiError(401, "token_expired")
        return tok.user


def job_view(job: JobRecord) -> dict:
    s = job.spec
    return {
        "job_id": s.job_id,
        "user": s.user,
        "nodes": s.nodes,
        "tasks_per_node": s.tasks_per_node,
        "burstable": s.burstable,
        "state": job.state.value,
        "submit_time": job.submit_time,
        "start_time": job.start_time,
        "end_time": job.end_time,
        "remaining": job.remaining,
        "ranks": sorted(job.ranks_held),
    }


class TenancyApi:
    """Request router bound to one MiniCluster.

    With ``inline=True`` the caller's thread drains the engine command queue
    right after posting, which is what tests use.  In serve mode a driver
    thread does the draining and request threads just wait on the future.
    """

    def __init__(self, cluster: MiniCluster, ttl: float = DEFAULT_TTL, inline: bool = True):
        self.cluster = cluster
        self.engine = cluster.engine
        self.tokens = TokenStore(lambda: self.engine.now, ttl)
        self.inline = inline
        spec = cluster.spec
        users = dict(spec.users)
        if spec.users and AuthMode(spec.auth_mode) is AuthMode.SINGLE_USER:
            users = dict(spec.users[:1])
        self.users = users

    @property
    def auth_enabled(self) -> bool:
        return bool(self.users)

    def handle(self, request: ApiRequest) -> ApiResponse:
        future = self.engine.post(lambda: self._dispatch(request))
        if self.inline:
            self.engine.drain()
        return future.result()

    # everything below runs on the engine's command stream

    def _dispatch(self, req: ApiRequest) -> ApiResponse:
        try:
            status, body = self._route(req)
            return ApiResponse(status, body)
        except ApiError as exc:
            body = {"error": exc.code}
            if exc.detail:
                body["detail"] = exc.detail
            return ApiResponse(exc.status, body)

    def _route(self, req: ApiRequest) -> tuple[int, dict]:
        method = req.method.upper()
        path = req.path.rstrip("/") or "/"
        if path == "/v1/auth/token":
            self._allow(method, "POST")
            return self._authenticate(req)
        if path == "/v1/metrics":
            self._allow(method, "GET")
            return self._metrics()
        if path == "/v1/jobs":
            self._allow(method, "GET", "POST")
            user = self._identify(req)
            if method == "POST":
                return self._submit(user, req.body)
            return 200, {"jobs": [job_view(j) for j in self._queue().jobs.values()]}
        m = _JOB_PATH.match(path)
        if m:
            self._allow(method, "GET", "DELETE")
            user = self._identify(req)
            job = self._job(m.group(1))
            if method == "GET":
                return 200, job_view(job)
            return self._cancel(user, job)
        if path == "/v1/cluster/size":
            self._allow(method, "PATCH")
            self._identify(req)
            return self._resize(req.body)
        raise ApiError(404, "not_found", path)

    @staticmethod
    def _allow(method: str, *allowed: str) -> None:
        if method not in allowed:
            raise ApiError(405, "method_not_allowed")

    def _authenticate(self, req: ApiRequest) -> tuple[int, dict]:
        if not self.auth_enabled:
            raise ApiError(403, "auth_disabled")
        scheme, _, value = _header(req, "authorization").partition(" ")
        if scheme.lower() != "basic":
            raise ApiError(401, "invalid_credentials")
        try:
            user, sep, password = base64.b64decode(value, validate=True).decode().partition(":")
        except (binascii.Error, UnicodeDecodeError):
            raise ApiError(401, "invalid_credentials") from None
        stored = self.users.get(user)
        if not sep or stored is None or not check_password(password, stored):
            raise ApiError(401, "invalid_credentials")
        tok = self.tokens.issue(user)
        return 200, {"token": tok.token, "user": user, "issued_at": tok.issued_at, "expires_at": tok.expires_at}

    def _identify(self, req: ApiRequest) -> str:
        if not self.auth_enabled:
            return ANONYMOUS
        scheme, _, value = _header(req, "authorization").partition(" ")
        if scheme.lower() != "bearer" or not value:
            raise ApiError(401, "missing_token")
        return self.tokens.check(value)

    def _queue(self):
        if self.cluster.queue is None:
            raise ApiError(503, "lead_not_ready")
        return self.cluster.queue

    def _job(self, raw: str) -> JobRecord:
        try:
            return self._queue().get(int(raw))
        except (ValueError, UnknownJob):
            raise ApiError(404, "unknown_job", raw) from None

    def _submit(self, user: str, body: Any) -> tuple[int, dict]:
        if not isinstance(body, dict) or "nodes" not in body:
            raise ApiError(400, "invalid_body", "expected an object with at least 'nodes'")
        extra = set(body) - _JOB_FIELDS
        if extra:
            raise ApiError(400, "invalid_body", f"unknown fields {sorted(extra)}")
        try:
            spec = JobSpec(job_id=None, user=user, **body)
            job = self.cluster.submit(spec)
        except (InvalidJob, TypeError) as exc:
            raise ApiError(400, "invalid_body", str(exc)) from None
        except LeadNotReady:
            raise ApiError(503, "lead_not_ready") from None
        return 201, {"job_id": job.job_id, "state": job.state.value}

    def _cancel(self, user: str, job: JobRecord) -> tuple[int, dict]:
        if self.auth_enabled and job.spec.user != user:
            raise ApiError(403, "not_owner")
        if job.state in TERMINAL_STATES:
            raise ApiError(409, "job_finished", job.state.value)
        self._queue().cancel(job.job_id)
        return 200, job_view(job)

    def _resize(self, body: Any) -> tuple[int, dict]:
        if not isinstance(body, dict) or "size" not in body:
            raise ApiError(400, "invalid_body", "expected {'size': int}")
        try:
            desired = self.cluster.request_resize(body["size"], source="api")
        except ValidationError as exc:
            raise ApiError(409, "resize_rejected", ",".join(exc.codes)) from None
        return 200, {"size": desired.size, "generation": desired.generation}

    def _metrics(self) -> tuple[int, dict]:
        try:
            return 200, self.cluster.metrics().as_dict()
        except LeadNotReady:
            raise ApiError(503, "lead_not_ready") from None


def _header(req: ApiRequest, name: str) -> str:
    for key, value in req.headers.items():
        if key.lower() == name:
            return value
    return ""


# local socket server


class EngineDriver(threading.Thread):
    """Advances the engine at ``speed`` simulated seconds per wall second."""

    def __init__(self, engine, speed: float = 1.0, tick: float = 0.05):
        super().__init__(daemon=True)
        self.engine = engine
        self.speed = speed
        self.tick = tick
        self.halt = threading.Event()

    def run(self) -> None:
        while not self.halt.is_set():
            self.engine.drain()
            self.engine.advance(self.engine.now + self.tick * self.speed)
            time.sleep(self.tick)


def make_server(api: TenancyApi, host: str = "127.0.0.1", port: int = 8050) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def _serve(self):
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            try:
                body = json.loads(raw) if raw else None
            except json.JSONDecodeError:
                resp = ApiResponse(400, {"error": "invalid_body", "detail": "body is not JSON"})
            else:
                resp = api.handle(ApiRequest(self.command, self.path, dict(self.headers), body))
            payload = json.dumps(resp.body).encode()
            self.send_response(resp.status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        do_GET = do_POST = do_PATCH = do_DELETE = _serve

        def log_message(self, fmt, *args):
            logger.info("%s " + fmt, self.address_string(), *args)

    return ThreadingHTTPServer((host, port), Handler)
