"""Exception hierarchy shared across the harness."""

from __future__ import annotations


class GrantboxError(Exception):
    """Base class for all harness errors."""


class ConfigError(GrantboxError):
    """Invalid configuration document or record (exit code 1 territory)."""


class ProtocolError(GrantboxError):
    """Malformed or unexpected JSON-RPC / MCP traffic."""

    def __init__(self, message, code=None):
        super().__init__(message)
        self.code = code


class SessionError(GrantboxError):
    """Session-level failure (handshake timeout, closed transport)."""

    def __init__(self, message, elapsed=None):
        super().__init__(message)
        self.elapsed = elapsed


class BridgeStartError(GrantboxError):
    """Bridge could not be started for a server."""

    def __init__(self, server, message):
        super().__init__(f"bridge start failed for server {server!r}: {message}")
        self.server = server


class UnknownToolError(GrantboxError):
    """Tool name not advertised by the session's server; raised before any wire traffic."""


class SandboxError(GrantboxError):
    """Base for sandbox-runtime failures (exit code 2 territory)."""


class ProvisioningError(SandboxError):
    pass


class PlanningError(SandboxError):
    """Deployment planning failed (typically an unresolvable path)."""


class DeploymentError(SandboxError):
    """Fetch/setup/start failure while deploying a server into the sandbox.

    ``stage`` is one of fetch | setup | start; ``index`` is the 1-based
    setup-command index when stage == setup.
    """

    def __init__(self, server, stage, message, index=None, output=None):
        detail = f"deploy {server!r} failed at stage {stage}"
        if index is not None:
            detail += f" (command #{index})"
        detail += f": {message}"
        super().__init__(detail)
        self.server = server
        self.stage = stage
        self.index = index
        self.output = output


class StartServerError(GrantboxError):
    """start_server failed; carries the lifecycle stage label."""

    def __init__(self, server, stage, message=""):
        detail = f"start of {server!r} failed at stage {stage}"
        if message:
            detail += f": {message}"
        super().__init__(detail)
        self.server = server
        self.stage = stage


class RecoveryError(GrantboxError):
    """Recovery exhausted every escalation step."""


class InsufficientServersError(GrantboxError):
    """Registry smaller than the mode's minimum server count."""


class GenerationError(GrantboxError):
    """Request generation failed outside the normal retry flow."""


class ModelBackendError(GrantboxError):
    """Model backend unreachable or returned an unusable payload."""


class ScriptExhaustedError(ModelBackendError):
    """A strict scripted model ran past the end of its script."""


class InfrastructureError(GrantboxError):
    """A case aborted for infrastructure reasons; excluded from the ASR denominator."""


class IntegrityError(GrantboxError):
    """Stored artifacts are inconsistent (e.g. outcome without a matching case)."""
