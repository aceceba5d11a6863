"""Isolated execution runtime: provisioning, server deployment, reset and rebuild.

Two backends share one interface. The process backend runs servers as plain
subprocesses inside a scratch directory tree and needs nothing from the host;
the container backend drives an OCI-compatible runtime binary. The backend is
selected explicitly or via ``GRANTBOX_SANDBOX_BACKEND``.

Reset restores the mutable filesystem from the snapshot taken at provision
time and verifies the baseline digest; rebuild destroys everything and
re-provisions from the baseline image source.
"""

from __future__ import annotations

import hashlib
import os
import re
import shlex
import shutil
import subprocess
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError, DeploymentError, PlanningError, ProvisioningError, SandboxError

BACKEND_ENV = "GRANTBOX_SANDBOX_BACKEND"
BUILTIN_MOCKSERVERS = "builtin:mockservers"

_PATH_RE = re.compile(r"(?<![\w./:@-])/(?:[A-Za-z0-9._@%+-]+/)*[A-Za-z0-9._@%+-]+")


# ---------------------------------------------------------------------------
# Specs and plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mount:
    host_path: str
    sandbox_path: str
    read_only: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "Mount":
        unknown = set(d) - {"host_path", "sandbox_path", "read_only"}
        if unknown:
            raise ConfigError(f"unknown mount fields: {sorted(unknown)}")
        return cls(d["host_path"], d["sandbox_path"], bool(d.get("read_only", False)))

    def to_dict(self) -> dict:
        return {"host_path": self.host_path, "sandbox_path": self.sandbox_path, "read_only": self.read_only}


@dataclass(frozen=True)
class ResourceLimits:
    cpu_seconds: Optional[int] = None
    memory_mb: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceLimits":
        unknown = set(d) - {"cpu_seconds", "memory_mb"}
        if unknown:
            raise ConfigError(f"unknown resource_limits fields: {sorted(unknown)}")
        return cls(d.get("cpu_seconds"), d.get("memory_mb"))


@dataclass(frozen=True)
class SandboxSpec:
    baseline_image: str
    mounts: tuple = ()
    network_policy: str = "direct"
    resource_limits: Optional[ResourceLimits] = None

    def __post_init__(self):
        if self.network_policy not in ("direct", "via_interceptor"):
            raise ConfigError(f"network_policy must be direct|via_interceptor, got {self.network_policy!r}")
        paths = [m.sandbox_path for m in self.mounts]
        for p in paths:
            if not p.startswith("/"):
                raise ConfigError(f"mount sandbox path must be absolute: {p!r}")
        for i, a in enumerate(paths):
            for b in paths[i + 1:]:
                if a == b:
                    continue
                if a.startswith(b.rstrip("/") + "/") or b.startswith(a.rstrip("/") + "/"):
                    raise ConfigError(f"mount sandbox paths are nested: {a!r} and {b!r}")
        limits = self.resource_limits
        if limits is not None:
            if limits.cpu_seconds is not None and limits.cpu_seconds <= 0:
                raise ConfigError("resource_limits.cpu_seconds must be positive")
            if limits.memory_mb is not None and limits.memory_mb <= 0:
                raise ConfigError("resource_limits.memory_mb must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SandboxSpec":
        unknown = set(d) - {"baseline_image", "mounts", "network_policy", "resource_limits"}
        if unknown:
            raise ConfigError(f"unknown sandbox fields: {sorted(unknown)}")
        if "baseline_image" not in d:
            raise ConfigError("sandbox.baseline_image is required")
        limits = d.get("resource_limits")
        return cls(
            baseline_image=d["baseline_image"],
            mounts=tuple(Mount.from_dict(m) for m in d.get("mounts", [])),
            network_policy=d.get("network_policy", "direct"),
            resource_limits=ResourceLimits.from_dict(limits) if limits else None,
        )


@dataclass(frozen=True)
class PathMapping:
    declared: str
    sandbox_path: str
    scope: str  # "sandbox" (translate under fs root) | "host" (leave verbatim)

    def to_dict(self) -> dict:
        return {"declared": self.declared, "sandbox_path": self.sandbox_path, "scope": self.scope}


@dataclass(frozen=True)
class DeploymentPlan:
    server: str
    fetch_source: str
    setup_commands: tuple
    start_command: str
    env: tuple  # ((name, value), ...) in declaration order
    path_mappings: tuple

    def to_dict(self) -> dict:
        return {
            "server": self.server,
            "fetch_source": self.fetch_source,
            "setup_commands": list(self.setup_commands),
            "start_command": self.start_command,
            "env": {k: v for k, v in self.env},
            "path_mappings": [m.to_dict() for m in self.path_mappings],
        }


@dataclass
class SandboxState:
    phase: str = "absent"
    baseline_digest: Optional[str] = None
    deployed: set = field(default_factory=set)


@dataclass
class ServerProcessHandle:
    name: str
    process: subprocess.Popen
    port: Optional[int] = None
    workdir: Optional[str] = None
    log_path: Optional[str] = None

    @property
    def pid(self) -> int:
        return self.process.pid

    def alive(self) -> bool:
        return self.process.poll() is None


_PHASE_EDGES = {
    ("absent", "provisioning"),
    ("provisioning", "ready"),
    ("provisioning", "absent"),   # provisioning failure unwinds
    ("ready", "degraded"),
    ("ready", "rebuilding"),
    ("degraded", "ready"),        # reset from degraded
    ("degraded", "rebuilding"),
    ("rebuilding", "ready"),
}


def _tree_digest(root: Path) -> str:
    """Content digest over the mutable tree: sorted (path, kind, payload) entries."""
    h = hashlib.sha256()
    root = Path(root)
    entries = sorted(p.relative_to(root).as_posix() for p in root.rglob("*"))
    for rel in entries:
        p = root / rel
        h.update(rel.encode())
        if p.is_symlink():
            h.update(b"\x00L" + os.readlink(p).encode())
        elif p.is_dir():
            h.update(b"\x00D")
        elif p.is_file():
            h.update(b"\x00F" + hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _find_paths(text: str) -> list[str]:
    return _PATH_RE.findall(text or "")


def _replace_all(text: str, replacements: dict) -> str:
    """Simultaneous single-pass replacement, longest key first.

    Sequential str.replace would rescan substituted output, so a short path
    that is a prefix of a longer one could corrupt the longer one's result.
    """
    if not replacements:
        return text
    pattern = re.compile("|".join(
        re.escape(k) for k in sorted(replacements, key=len, reverse=True)))
    return pattern.sub(lambda m: replacements[m.group(0)], text)


# ---------------------------------------------------------------------------
# Deployment planning (pure: depends only on config, spec, baseline tree)
# ---------------------------------------------------------------------------

def resolve_baseline_dir(identifier: str) -> Optional[Path]:
    """Baseline image identifiers are directories; ``minimal`` is synthesized."""
    if identifier == "minimal":
        return None
    p = Path(identifier)
    return p if p.is_dir() else None


_MINIMAL_DIRS = ("workspace", "tmp", "scratch")


def plan_deployment(config, spec: SandboxSpec) -> DeploymentPlan:
    """Rewrite every filesystem path in the server config to its sandbox location.

    Resolution order per absolute-path token: longest mount prefix; then
    presence of the path (or an ancestor below ``/``) in the baseline image
    tree; then existence on the host (left verbatim, e.g. interpreters);
    otherwise the plan fails naming the path and where it came from.
    """
    baseline = resolve_baseline_dir(spec.baseline_image)
    mounts = sorted(spec.mounts, key=lambda m: -len(m.host_path))
    mappings: dict[str, PathMapping] = {}

    def in_baseline(path: str) -> bool:
        probe = path
        while probe and probe != "/":
            rel = probe.lstrip("/")
            if baseline is not None and (baseline / rel).exists():
                return True
            if baseline is None and rel.split("/", 1)[0] in _MINIMAL_DIRS:
                return True
            probe = os.path.dirname(probe)
        return False

    def resolve(token: str, origin: str) -> str:
        for m in mounts:
            base = m.host_path.rstrip("/")
            if token == base or token.startswith(base + "/"):
                mapped = m.sandbox_path.rstrip("/") + token[len(base):]
                mappings.setdefault(token, PathMapping(token, mapped, "sandbox"))
                return mapped
        if in_baseline(token):
            mappings.setdefault(token, PathMapping(token, token, "sandbox"))
            return token
        if os.path.exists(token):
            mappings.setdefault(token, PathMapping(token, token, "host"))
            return token
        raise PlanningError(f"unresolvable path {token!r} referenced by {origin} of server {config.name!r}")

    def rewrite(text: str, origin: str) -> str:
        resolved = {token: resolve(token, origin) for token in set(_find_paths(text))}
        return _replace_all(text, resolved)

    setup = tuple(rewrite(c, f"setup_commands[{i + 1}]") for i, c in enumerate(config.setup_commands))
    start = rewrite(config.start_command, "start_command")
    env_items = tuple((k, rewrite(v, f"env[{k}]")) for k, v in config.env.items())
    ordered = tuple(sorted(mappings.values(), key=lambda m: m.declared))
    return DeploymentPlan(
        server=config.name,
        fetch_source=config.source_url,
        setup_commands=setup,
        start_command=start,
        env=env_items,
        path_mappings=ordered,
    )


# ---------------------------------------------------------------------------
# Process backend
# ---------------------------------------------------------------------------

class ProcessSandbox:
    """Scratch-directory sandbox running servers as host subprocesses.

    Isolation is path discipline, not a kernel boundary: mounts are copied in,
    server processes get the sandbox tree as HOME/cwd, and the bundled tools
    confine themselves to their root. Use the container backend when genuine
    isolation is required.
    """

    backend = "process"

    def __init__(self, spec: SandboxSpec, work_dir=None, interceptor=None, start_grace: float = 0.2):
        self.spec = spec
        self.root = Path(work_dir) if work_dir else Path.cwd() / "sandbox"
        self.interceptor = interceptor
        self.start_grace = start_grace
        self.state = SandboxState()
        self.last_reset_seconds: Optional[float] = None
        self.last_rebuild_seconds: Optional[float] = None
        self._handles: dict[str, ServerProcessHandle] = {}

    # -- layout -------------------------------------------------------------

    @property
    def fs_root(self) -> Path:
        return self.root / "fs"

    @property
    def snapshot_root(self) -> Path:
        return self.root / "snapshot"

    @property
    def logs_root(self) -> Path:
        return self.root / "logs"

    def effective_path(self, sandbox_path: str) -> str:
        """Translate a sandbox-absolute path to its on-host location."""
        return str(self.fs_root / sandbox_path.lstrip("/"))

    def _set_phase(self, phase: str) -> None:
        if (self.state.phase, phase) not in _PHASE_EDGES:
            raise SandboxError(f"illegal phase transition {self.state.phase} -> {phase}")
        self.state.phase = phase

    # -- provisioning -------------------------------------------------------

    def provision(self) -> SandboxState:
        if self.state.phase != "absent":
            raise ProvisioningError(f"sandbox already active (phase {self.state.phase})")
        self._set_phase("provisioning")
        try:
            self._materialize_baseline()
            self.state.baseline_digest = _tree_digest(self.fs_root)
            shutil.copytree(self.fs_root, self.snapshot_root)
            self.logs_root.mkdir(parents=True, exist_ok=True)
        except ProvisioningError:
            self._set_phase("absent")
            raise
        except Exception as exc:
            self._set_phase("absent")
            raise ProvisioningError(str(exc)) from exc
        self._set_phase("ready")
        self.state.deployed = set()
        return self.state

    def _materialize_baseline(self) -> None:
        if self.root.exists():
            shutil.rmtree(self.root)
        self.fs_root.mkdir(parents=True)
        baseline = resolve_baseline_dir(self.spec.baseline_image)
        if baseline is None and self.spec.baseline_image != "minimal":
            raise ProvisioningError(f"baseline image not found: {self.spec.baseline_image!r}")
        if baseline is None:
            for rel in _MINIMAL_DIRS:
                (self.fs_root / rel).mkdir()
        else:
            shutil.copytree(baseline, self.fs_root, dirs_exist_ok=True)
        for mount in self.spec.mounts:
            src = Path(mount.host_path)
            if not src.exists():
                raise ProvisioningError(f"mount source missing: {mount.host_path}")
            dest = self.fs_root / mount.sandbox_path.lstrip("/")
            dest.parent.mkdir(parents=True, exist_ok=True)
            if src.is_dir():
                shutil.copytree(src, dest, dirs_exist_ok=True)
            else:
                shutil.copy2(src, dest)

    # -- deployment ---------------------------------------------------------

    def plan_deployment(self, config) -> DeploymentPlan:
        return plan_deployment(config, self.spec)

    def _fetch(self, plan: DeploymentPlan) -> Path:
        dest = self.fs_root / "srv" / plan.server
        if dest.exists():
            shutil.rmtree(dest)
        dest.mkdir(parents=True)
        source = plan.fetch_source
        try:
            if source == BUILTIN_MOCKSERVERS:
                pkg_dir = Path(__file__).parent / "mockservers"
                shutil.copytree(pkg_dir, dest / "mockservers",
                                ignore=shutil.ignore_patterns("__pycache__"))
            elif source.startswith("file://"):
                self._fetch_local(Path(source[len("file://"):]), dest)
            elif source.startswith(("http://", "https://")):
                target = dest / (os.path.basename(source.rstrip("/")) or "download")
                with urllib.request.urlopen(source, timeout=60) as resp:
                    target.write_bytes(resp.read())
            else:
                self._fetch_local(Path(source), dest)
        except DeploymentError:
            raise
        except Exception as exc:
            raise DeploymentError(plan.server, "fetch", f"{source}: {exc}") from exc
        return dest

    def _fetch_local(self, src: Path, dest: Path) -> None:
        if src.is_dir():
            shutil.copytree(src, dest / src.name, ignore=shutil.ignore_patterns("__pycache__"))
        elif src.is_file():
            shutil.copy2(src, dest / src.name)
        else:
            raise DeploymentError("?", "fetch", f"source not found: {src}")

    def _child_env(self, plan: DeploymentPlan, srv_dir: Path) -> dict:
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(self.fs_root),
            "LANG": os.environ.get("LANG", "C.UTF-8"),
            "PYTHONUNBUFFERED": "1",
            "PYTHONPATH": str(srv_dir),
        }
        for k, v in plan.env:
            env[k] = self._translate(plan, v)
        if self.spec.network_policy == "via_interceptor" and self.interceptor is not None:
            proxy = self.interceptor.register_server(plan.server)
            for var in ("HTTP_PROXY", "http_proxy", "HTTPS_PROXY", "https_proxy"):
                env[var] = proxy
            env.pop("NO_PROXY", None)
            env.pop("no_proxy", None)
        return env

    def _translate(self, plan: DeploymentPlan, text: str) -> str:
        return _replace_all(text, {
            m.sandbox_path: self.effective_path(m.sandbox_path)
            for m in plan.path_mappings if m.scope == "sandbox"
        })

    def _rlimit_preexec(self):
        limits = self.spec.resource_limits
        if limits is None:
            return os.setsid
        import resource as _resource

        def preexec():
            os.setsid()
            if limits.cpu_seconds:
                _resource.setrlimit(_resource.RLIMIT_CPU, (limits.cpu_seconds, limits.cpu_seconds))
            if limits.memory_mb:
                nbytes = limits.memory_mb * 1024 * 1024
                _resource.setrlimit(_resource.RLIMIT_AS, (nbytes, nbytes))

        return preexec

    def deploy(self, plan: DeploymentPlan, port: Optional[int] = None) -> ServerProcessHandle:
        if self.state.phase != "ready":
            raise DeploymentError(plan.server, "fetch", f"sandbox not ready (phase {self.state.phase})")
        if plan.server in self._handles:
            self.stop_server(plan.server)
        srv_dir = self._fetch(plan)
        env = self._child_env(plan, srv_dir)
        for i, command in enumerate(plan.setup_commands, start=1):
            effective = self._translate(plan, command)
            proc = subprocess.run(effective, shell=True, cwd=self.fs_root, env=env,
                                  capture_output=True, text=True, timeout=300)
            if proc.returncode != 0:
                raise DeploymentError(
                    plan.server, "setup",
                    f"exit {proc.returncode}: {(proc.stderr or proc.stdout)[-500:]}",
                    index=i, output=proc.stderr,
                )
        start_cmd = self._translate(plan, plan.start_command)
        log_path = self.logs_root / f"{plan.server}.stderr.log"
        log_fh = open(log_path, "ab")
        try:
            process = subprocess.Popen(
                start_cmd, shell=True, cwd=self.fs_root, env=env,
                stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=log_fh,
                preexec_fn=self._rlimit_preexec(),
            )
        except OSError as exc:
            log_fh.close()
            raise DeploymentError(plan.server, "start", str(exc)) from exc
        finally:
            if not log_fh.closed:
                log_fh.close()
        time.sleep(self.start_grace)
        if process.poll() is not None:
            excerpt = ""
            if log_path.exists():
                excerpt = log_path.read_text(errors="replace")[-500:]
            raise DeploymentError(plan.server, "start",
                                  f"process exited immediately with code {process.returncode}: {excerpt}")
        handle = ServerProcessHandle(plan.server, process, port=port,
                                     workdir=str(self.fs_root), log_path=str(log_path))
        self._handles[plan.server] = handle
        self.state.deployed.add(plan.server)
        return handle

    def stop_server(self, name: str) -> None:
        handle = self._handles.pop(name, None)
        self.state.deployed.discard(name)
        if handle is None or handle.process.poll() is not None:
            return
        try:
            os.killpg(os.getpgid(handle.process.pid), 15)
        except (ProcessLookupError, PermissionError):
            handle.process.terminate()
        try:
            handle.process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(os.getpgid(handle.process.pid), 9)
            except (ProcessLookupError, PermissionError):
                handle.process.kill()
            handle.process.wait(timeout=5)

    def stop_all(self) -> None:
        for name in list(self._handles):
            self.stop_server(name)

    def handle(self, name: str) -> Optional[ServerProcessHandle]:
        return self._handles.get(name)

    # -- restoration --------------------------------------------------------

    def reset(self) -> SandboxState:
        if self.state.phase not in ("ready", "degraded"):
            raise SandboxError(f"reset requires ready or degraded phase, not {self.state.phase}")
        started = time.monotonic()
        self.stop_all()
        shutil.rmtree(self.fs_root)
        shutil.copytree(self.snapshot_root, self.fs_root)
        digest = _tree_digest(self.fs_root)
        if digest != self.state.baseline_digest:
            return self.rebuild()
        if self.state.phase == "degraded":
            self._set_phase("ready")
        self.state.deployed = set()
        self.last_reset_seconds = time.monotonic() - started
        return self.state

    def rebuild(self) -> SandboxState:
        if self.state.phase == "provisioning":
            raise SandboxError("cannot rebuild while provisioning")
        started = time.monotonic()
        self.stop_all()
        if self.state.phase == "absent":
            state = self.provision()
            self.last_rebuild_seconds = time.monotonic() - started
            return state
        self._set_phase("rebuilding")
        if self.root.exists():
            shutil.rmtree(self.root)
        self._materialize_baseline()
        self.state.baseline_digest = _tree_digest(self.fs_root)
        shutil.copytree(self.fs_root, self.snapshot_root)
        self.logs_root.mkdir(parents=True, exist_ok=True)
        self._set_phase("ready")
        self.state.deployed = set()
        self.last_rebuild_seconds = time.monotonic() - started
        return self.state

    def mark_degraded(self) -> None:
        if self.state.phase == "ready":
            self._set_phase("degraded")

    def destroy(self) -> None:
        self.stop_all()
        if self.root.exists():
            shutil.rmtree(self.root, ignore_errors=True)
        self.state = SandboxState()


# ---------------------------------------------------------------------------
# Container backend
# ---------------------------------------------------------------------------

class ContainerSandbox:
    """Sandbox backed by an OCI runtime binary (docker/podman compatible CLI).

    Servers run via ``exec -i`` so their stdio pipes are bridgeable exactly
    like the process backend. ``runner`` is injectable for tests.
    """

    backend = "container"

    def __init__(self, spec: SandboxSpec, name: str = "grantbox-sandbox",
                 runtime: Optional[str] = None, runner=None, interceptor=None):
        self.spec = spec
        self.name = name
        self.runtime = runtime or os.environ.get("GRANTBOX_CONTAINER_RUNTIME", "docker")
        self.runner = runner or self._run_checked
        self.interceptor = interceptor
        self.state = SandboxState()
        self.last_reset_seconds: Optional[float] = None
        self.last_rebuild_seconds: Optional[float] = None
        self._handles: dict[str, ServerProcessHandle] = {}

    @property
    def snapshot_tag(self) -> str:
        return f"{self.name}-snapshot"

    def _run_checked(self, argv: list[str]) -> str:
        if shutil.which(self.runtime) is None:
            raise SandboxError(f"container runtime {self.runtime!r} not found on PATH")
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise SandboxError(f"{' '.join(argv)} failed: {proc.stderr.strip()}")
        return proc.stdout

    def _mount_args(self) -> list[str]:
        args = []
        for m in self.spec.mounts:
            suffix = ":ro" if m.read_only else ""
            args += ["-v", f"{m.host_path}:{m.sandbox_path}{suffix}"]
        return args

    def _limit_args(self) -> list[str]:
        limits = self.spec.resource_limits
        if limits is None:
            return []
        args = []
        if limits.memory_mb:
            args += ["--memory", f"{limits.memory_mb}m"]
        if limits.cpu_seconds:
            args += ["--cpus", "1"]
        return args

    def provision(self) -> SandboxState:
        if self.state.phase != "absent":
            raise ProvisioningError(f"sandbox already active (phase {self.state.phase})")
        self.state.phase = "provisioning"
        try:
            self.runner([self.runtime, "run", "-d", "--name", self.name,
                         *self._mount_args(), *self._limit_args(),
                         self.spec.baseline_image, "sleep", "infinity"])
            self.runner([self.runtime, "commit", self.name, self.snapshot_tag])
            self.state.baseline_digest = self._container_digest()
        except SandboxError as exc:
            self.state.phase = "absent"
            raise ProvisioningError(str(exc)) from exc
        self.state.phase = "ready"
        self.state.deployed = set()
        return self.state

    def _container_digest(self) -> str:
        out = self.runner([self.runtime, "exec", self.name, "sh", "-c",
                           "find /workspace /tmp /data -type f 2>/dev/null | sort | xargs -r sha256sum | sha256sum"])
        return out.split()[0] if out.split() else ""

    def plan_deployment(self, config) -> DeploymentPlan:
        return plan_deployment(config, self.spec)

    def deploy(self, plan: DeploymentPlan, port: Optional[int] = None) -> ServerProcessHandle:
        if self.state.phase != "ready":
            raise DeploymentError(plan.server, "fetch", f"sandbox not ready (phase {self.state.phase})")
        if plan.server in self._handles:
            self.stop_server(plan.server)
        srv_dir = f"/srv/{plan.server}"
        self.runner([self.runtime, "exec", self.name, "mkdir", "-p", srv_dir])
        if plan.fetch_source.startswith(("http://", "https://")):
            self.runner([self.runtime, "exec", self.name, "sh", "-c",
                         f"cd {srv_dir} && wget -q {shlex.quote(plan.fetch_source)}"])
        else:
            self.runner([self.runtime, "cp", plan.fetch_source, f"{self.name}:{srv_dir}/"])
        env_args = []
        for k, v in plan.env:
            env_args += ["--env", f"{k}={v}"]
        if self.spec.network_policy == "via_interceptor" and self.interceptor is not None:
            proxy = self.interceptor.register_server(plan.server)
            for var in ("HTTP_PROXY", "http_proxy", "HTTPS_PROXY", "https_proxy"):
                env_args += ["--env", f"{var}={proxy}"]
        for i, command in enumerate(plan.setup_commands, start=1):
            try:
                self.runner([self.runtime, "exec", *env_args, self.name, "sh", "-c", command])
            except SandboxError as exc:
                raise DeploymentError(plan.server, "setup", str(exc), index=i) from exc
        process = subprocess.Popen(
            [self.runtime, "exec", "-i", *env_args, self.name, "sh", "-c", plan.start_command],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
        )
        handle = ServerProcessHandle(plan.server, process, port=port, workdir=srv_dir)
        self._handles[plan.server] = handle
        self.state.deployed.add(plan.server)
        return handle

    def stop_server(self, name: str) -> None:
        handle = self._handles.pop(name, None)
        self.state.deployed.discard(name)
        if handle is not None and handle.process.poll() is None:
            handle.process.terminate()
            try:
                handle.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                handle.process.kill()

    def stop_all(self) -> None:
        for name in list(self._handles):
            self.stop_server(name)

    def handle(self, name: str) -> Optional[ServerProcessHandle]:
        return self._handles.get(name)

    def reset(self) -> SandboxState:
        if self.state.phase not in ("ready", "degraded"):
            raise SandboxError(f"reset requires ready or degraded phase, not {self.state.phase}")
        started = time.monotonic()
        self.stop_all()
        self.runner([self.runtime, "rm", "-f", self.name])
        self.runner([self.runtime, "run", "-d", "--name", self.name,
                     *self._mount_args(), *self._limit_args(), self.snapshot_tag, "sleep", "infinity"])
        digest = self._container_digest()
        if digest != self.state.baseline_digest:
            return self.rebuild()
        self.state.phase = "ready"
        self.state.deployed = set()
        self.last_reset_seconds = time.monotonic() - started
        return self.state

    def rebuild(self) -> SandboxState:
        if self.state.phase == "provisioning":
            raise SandboxError("cannot rebuild while provisioning")
        started = time.monotonic()
        self.stop_all()
        self.runner([self.runtime, "rm", "-f", self.name])
        self.runner([self.runtime, "rmi", "-f", self.snapshot_tag])
        self.state.phase = "absent"
        state = self.provision()
        self.last_rebuild_seconds = time.monotonic() - started
        return state

    def mark_degraded(self) -> None:
        if self.state.phase == "ready":
            self.state.phase = "degraded"

    def destroy(self) -> None:
        self.stop_all()
        try:
            self.runner([self.runtime, "rm", "-f", self.name])
            self.runner([self.runtime, "rmi", "-f", self.snapshot_tag])
        except SandboxError:
            pass
        self.state = SandboxState()


def create_sandbox(spec: SandboxSpec, backend: Optional[str] = None, **kwargs):
    backend = backend or os.environ.get(BACKEND_ENV, "process")
    if backend == "process":
        return ProcessSandbox(spec, **kwargs)
    if backend == "container":
        return ContainerSandbox(spec, **kwargs)
    raise ConfigError(f"unknown sandbox backend {backend!r} (expected process|container)")
