"""Server lifecycle: registry loading, startup, health checks, recovery.

A ``ServerManager`` owns the mapping from server configs to running processes,
bridge endpoints, and protocol sessions. Health is the conjunction of process
liveness, port reachability (when a port is declared), and a successful
non-empty tool listing. Repeated failures escalate from per-server restarts to
a full sandbox rebuild with redeployment of every registered server.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import gateway
from .clock import SYSTEM_CLOCK
from .errors import (
    ConfigError,
    DeploymentError,
    GrantboxError,
    RecoveryError,
    SessionError,
    StartServerError,
)
from .sandbox import SandboxSpec
from .serialization import digest_obj, write_jsonl

HEALTHY = "healthy"
SUSPECT = "suspect"
FAILED = "failed"
STOPPED = "stopped"


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

_SERVER_FIELDS = {
    "name", "source_url", "start_command", "setup_commands", "env",
    "transport", "port", "category", "mutating_tools",
}


@dataclass(frozen=True)
class ServerConfig:
    name: str
    source_url: str
    start_command: str
    setup_commands: tuple = ()
    env: dict = field(default_factory=dict)
    transport: str = "stdio"
    port: Optional[int] = None
    category: Optional[str] = None
    # Tools that mutate server-side state; drives reset-between-cases policy.
    mutating_tools: tuple = ()

    def __post_init__(self):
        if not self.name or "/" in self.name or "__" in self.name:
            raise ConfigError(f"invalid server name {self.name!r} (no slashes or double underscores)")
        if self.transport not in ("stdio", "sse"):
            raise ConfigError(f"transport must be stdio|sse, got {self.transport!r}")
        if self.transport == "sse" and self.port is None:
            raise ConfigError(f"server {self.name!r}: sse transport requires a port")

    @classmethod
    def from_dict(cls, d: dict) -> "ServerConfig":
        unknown = set(d) - _SERVER_FIELDS
        if unknown:
            raise ConfigError(f"unknown server fields: {sorted(unknown)}")
        missing = {"name", "source_url", "start_command"} - set(d)
        if missing:
            raise ConfigError(f"server config missing fields: {sorted(missing)}")
        return cls(
            name=d["name"],
            source_url=d["source_url"],
            start_command=d["start_command"],
            setup_commands=tuple(d.get("setup_commands", ())),
            env=dict(d.get("env", {})),
            transport=d.get("transport", "stdio"),
            port=d.get("port"),
            category=d.get("category"),
            mutating_tools=tuple(d.get("mutating_tools", ())),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "source_url": self.source_url,
            "start_command": self.start_command,
            "setup_commands": list(self.setup_commands),
            "env": dict(self.env),
            "transport": self.transport,
            "port": self.port,
            "category": self.category,
            "mutating_tools": list(self.mutating_tools),
        }


def load_registry(path) -> tuple[SandboxSpec, list[ServerConfig]]:
    """Parse a registry document: ``{"sandbox": {...}, "servers": [...]}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read registry {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("registry document must be a JSON object")
    unknown = set(doc) - {"sandbox", "servers"}
    if unknown:
        raise ConfigError(f"unknown registry fields: {sorted(unknown)}")
    if "sandbox" not in doc or "servers" not in doc:
        raise ConfigError("registry requires 'sandbox' and 'servers' sections")
    spec = SandboxSpec.from_dict(doc["sandbox"])
    servers = [ServerConfig.from_dict(s) for s in doc["servers"]]
    names = [s.name for s in servers]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ConfigError(f"duplicate server names: {sorted(dupes)}")
    return spec, servers


def registry_digest(spec: SandboxSpec, servers: list[ServerConfig]) -> str:
    doc = {
        "sandbox": {
            "baseline_image": spec.baseline_image,
            "mounts": [m.to_dict() for m in spec.mounts],
            "network_policy": spec.network_policy,
        },
        "servers": [s.to_dict() for s in sorted(servers, key=lambda s: s.name)],
    }
    return digest_obj(doc)


# ---------------------------------------------------------------------------
# Health
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ServerHealth:
    server: str
    status: str = HEALTHY
    process_alive: bool = True
    port_bound: bool = True
    tools_ok: bool = True
    consecutive_failures: int = 0
    restarts: int = 0
    checked_at: float = 0.0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.process_alive and self.port_bound and self.tools_ok

    def to_dict(self) -> dict:
        return {
            "server": self.server,
            "status": self.status,
            "process_alive": self.process_alive,
            "port_bound": self.port_bound,
            "tools_ok": self.tools_ok,
            "consecutive_failures": self.consecutive_failures,
            "restarts": self.restarts,
            "checked_at": self.checked_at,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class RecoveryPolicy:
    failures_to_suspect: int = 1
    failures_to_failed: int = 3
    max_restarts: int = 2
    check_interval_seconds: float = 5.0

    def __post_init__(self):
        if not (0 < self.failures_to_suspect <= self.failures_to_failed):
            raise ConfigError("recovery policy requires 0 < failures_to_suspect <= failures_to_failed")
        if self.max_restarts < 0:
            raise ConfigError("max_restarts cannot be negative")


def _port_open(port: int, timeout: float = 0.5) -> bool:
    try:
        with socket.create_connection(("127.0.0.1", port), timeout=timeout):
            return True
    except OSError:
        return False


# ---------------------------------------------------------------------------
# Manager
# ---------------------------------------------------------------------------

class ServerManager:
    """Deploys registered servers, tracks their health, and recovers failures."""

    def __init__(self, sandbox, bridge_host: gateway.BridgeHost,
                 policy: Optional[RecoveryPolicy] = None, clock=SYSTEM_CLOCK):
        self.sandbox = sandbox
        self.bridge_host = bridge_host
        self.policy = policy or RecoveryPolicy()
        self.clock = clock
        self.configs: dict[str, ServerConfig] = {}
        self.endpoints: dict[str, gateway.BridgeEndpoint] = {}
        self.sessions: dict[str, gateway.McpSession] = {}
        self.health: dict[str, ServerHealth] = {}
        self.history: list[dict] = []
        self._lock = threading.RLock()
        self._watch_thread: Optional[threading.Thread] = None
        self._watch_stop = threading.Event()

    # -- registration and startup -------------------------------------------

    def register(self, config: ServerConfig) -> None:
        with self._lock:
            if config.name in self.configs:
                raise ConfigError(f"server {config.name!r} already registered")
            self.configs[config.name] = config
            self.health[config.name] = ServerHealth(server=config.name, status=STOPPED,
                                                    process_alive=False, port_bound=False, tools_ok=False)

    def register_all(self, configs) -> None:
        for c in configs:
            self.register(c)

    def start_server(self, name: str) -> ServerHealth:
        config = self._config(name)
        self._teardown(name)
        try:
            plan = self.sandbox.plan_deployment(config)
            handle = self.sandbox.deploy(plan, port=config.port)
        except DeploymentError as exc:
            self._note_start_failure(name, exc.stage, str(exc))
            raise StartServerError(name, exc.stage) from exc
        except GrantboxError as exc:
            self._note_start_failure(name, "plan", str(exc))
            raise StartServerError(name, "plan") from exc
        try:
            endpoint = self.bridge_host.start_bridge(handle, config.transport)
            session = gateway.initialize_session(endpoint, server=name)
            tools = gateway.list_tools(session)
        except GrantboxError as exc:
            self.sandbox.stop_server(name)
            self._note_start_failure(name, "initialize", str(exc))
            raise StartServerError(name, "initialize") from exc
        if not tools:
            self.sandbox.stop_server(name)
            self._note_start_failure(name, "tools", "tool listing is empty")
            raise StartServerError(name, "tools")
        with self._lock:
            self.endpoints[name] = endpoint
            self.sessions[name] = session
            restarts = self.health[name].restarts
            health = ServerHealth(server=name, status=HEALTHY, restarts=restarts,
                                  checked_at=self.clock.monotonic())
            self.health[name] = health
            self.history.append(health.to_dict())
        return health

    def start_all(self) -> dict[str, ServerHealth]:
        return {name: self.start_server(name) for name in self.configs}

    def _config(self, name: str) -> ServerConfig:
        if name not in self.configs:
            raise ConfigError(f"unknown server {name!r}")
        return self.configs[name]

    def _note_start_failure(self, name: str, stage: str, detail: str) -> None:
        with self._lock:
            prev = self.health.get(name) or ServerHealth(server=name)
            health = replace(prev, status=FAILED, process_alive=False, port_bound=False,
                             tools_ok=False, detail=f"start/{stage}: {detail}",
                             checked_at=self.clock.monotonic())
            self.health[name] = health
            self.history.append(health.to_dict())

    def _teardown(self, name: str) -> None:
        with self._lock:
            session = self.sessions.pop(name, None)
            self.endpoints.pop(name, None)
        if session is not None:
            try:
                session.close()
            except Exception:
                pass
        self.bridge_host.stop_bridge(name)
        self.sandbox.stop_server(name)

    def session(self, name: str) -> gateway.McpSession:
        with self._lock:
            if name not in self.sessions:
                raise ConfigError(f"server {name!r} has no active session")
            return self.sessions[name]

    def endpoint(self, name: str) -> gateway.BridgeEndpoint:
        with self._lock:
            if name not in self.endpoints:
                raise ConfigError(f"server {name!r} has no active endpoint")
            return self.endpoints[name]

    # -- health -------------------------------------------------------------

    def check_health(self, name: str) -> ServerHealth:
        config = self._config(name)
        handle = self.sandbox.handle(name)
        process_alive = handle is not None and handle.alive()
        port_bound = True if config.port is None else _port_open(config.port)
        tools_ok = False
        detail = ""
        if process_alive:
            session = self.sessions.get(name)
            if session is None:
                detail = "no session"
            else:
                try:
                    tools = gateway.list_tools(session)
                    tools_ok = bool(tools)
                    if not tools_ok:
                        detail = "tool listing is empty"
                except GrantboxError as exc:
                    detail = f"tools: {exc}"
        else:
            detail = "process not running"
        with self._lock:
            prev = self.health[name]
            if process_alive and port_bound and tools_ok:
                status, failures = HEALTHY, 0
            else:
                failures = prev.consecutive_failures + 1
                if failures >= self.policy.failures_to_failed:
                    status = FAILED
                elif failures >= self.policy.failures_to_suspect:
                    status = SUSPECT
                else:
                    status = prev.status
            health = ServerHealth(server=name, status=status, process_alive=process_alive,
                                  port_bound=port_bound, tools_ok=tools_ok,
                                  consecutive_failures=failures, restarts=prev.restarts,
                                  checked_at=self.clock.monotonic(), detail=detail)
            self.health[name] = health
            self.history.append(health.to_dict())
        return health

    def check_all(self) -> dict[str, ServerHealth]:
        return {name: self.check_health(name) for name in self.configs}

    # -- recovery -----------------------------------------------------------

    def recover(self, name: str) -> ServerHealth:
        """Restart up to the policy budget; then rebuild the sandbox and redeploy all."""
        while self.health[name].restarts < self.policy.max_restarts:
            with self._lock:
                self.health[name] = replace(self.health[name],
                                            restarts=self.health[name].restarts + 1)
            try:
                health = self.start_server(name)
            except StartServerError:
                continue
            if health.status == HEALTHY:
                return self.check_health(name)
        return self._rebuild_and_redeploy(name)

    def _rebuild_and_redeploy(self, origin: str) -> ServerHealth:
        for name in list(self.configs):
            self._teardown(name)
        try:
            self.sandbox.rebuild()
        except GrantboxError as exc:
            raise RecoveryError(f"sandbox rebuild failed while recovering {origin!r}: {exc}") from exc
        with self._lock:
            for name in self.configs:
                self.health[name] = replace(self.health[name], restarts=0)
        failures = []
        for name in self.configs:
            try:
                self.start_server(name)
            except StartServerError as exc:
                failures.append(f"{name}: {exc}")
        if failures:
            raise RecoveryError("redeploy after rebuild failed: " + "; ".join(failures))
        return self.check_health(origin)

    # -- watch loop ---------------------------------------------------------

    def watch(self, interval: Optional[float] = None) -> None:
        if self._watch_thread is not None:
            return
        interval = interval if interval is not None else self.policy.check_interval_seconds
        self._watch_stop.clear()

        def loop():
            while not self._watch_stop.is_set():
                try:
                    for name, health in self.check_all().items():
                        if health.status == FAILED:
                            try:
                                self.recover(name)
                            except RecoveryError:
                                self._watch_stop.set()
                                return
                except Exception:
                    pass
                self._watch_stop.wait(interval)

        self._watch_thread = threading.Thread(target=loop, name="health-watch", daemon=True)
        self._watch_thread.start()

    def stop_watch(self) -> None:
        self._watch_stop.set()
        if self._watch_thread is not None:
            self._watch_thread.join(timeout=10)
            self._watch_thread = None

    # -- shutdown and export ------------------------------------------------

    def shutdown(self) -> None:
        self.stop_watch()
        for name in list(self.configs):
            self._teardown(name)
            with self._lock:
                self.health[name] = replace(self.health[name], status=STOPPED,
                                            process_alive=False, tools_ok=False)

    def export_history(self, path) -> None:
        write_jsonl(path, self.history)
