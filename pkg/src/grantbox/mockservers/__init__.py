"""Bundled mock MCP servers (stdio transport, stdlib only).

Self-contained by design: the sandbox deployer copies this directory as a
top-level ``mockservers`` package and starts it with ``python3 -m mockservers``.
"""

from .profiles import PROFILE_CATEGORIES, PROFILES, ROSTER, ToolSpec
from .server import Faults, MockMcpServer

__all__ = ["PROFILES", "PROFILE_CATEGORIES", "ROSTER", "ToolSpec", "Faults", "MockMcpServer"]
