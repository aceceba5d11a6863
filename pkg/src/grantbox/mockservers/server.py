"""Stdio JSON-RPC engine for the mock MCP servers.

Speaks newline-delimited JSON-RPC 2.0 on stdin/stdout and supports the MCP
methods ``initialize``, ``tools/list`` and ``tools/call``. Fault-injection
flags make the server misbehave in controlled ways for lifecycle and gateway
tests. All responses are serialized canonically (sorted keys, compact
separators) so identical requests yield identical bytes across processes.
"""

from __future__ import annotations

import json
import sys
import threading
import zlib
from dataclasses import dataclass

from .profiles import PROFILES, Context, ToolError

PROTOCOL_VERSION = "2025-03-26"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class Faults:
    """Scripted misbehavior knobs, all off by default."""

    no_init_reply: bool = False
    init_error_code: int | None = None
    fail_tools_after: int | None = None
    empty_tools_after: int | None = None
    shuffle_replies: bool = False


class MockMcpServer:
    def __init__(self, profile: str, root: str, label: str | None = None, faults: Faults | None = None):
        if profile not in PROFILES:
            raise ValueError(f"unknown profile: {profile}")
        self.profile = profile
        self.tools = {t.name: t for t in PROFILES[profile]}
        self.ctx = Context(root, label or profile)
        self.faults = faults or Faults()
        self._tools_pulls = 0
        self._out_lock = threading.Lock()
        self._state_lock = threading.Lock()

    # -- wire helpers -------------------------------------------------------

    def _write(self, obj) -> None:
        line = _dumps(obj)
        with self._out_lock:
            sys.stdout.write(line + "\n")
            sys.stdout.flush()

    def _error(self, msg_id, code, message):
        return {"jsonrpc": "2.0", "id": msg_id, "error": {"code": code, "message": message}}

    def _result(self, msg_id, result):
        return {"jsonrpc": "2.0", "id": msg_id, "result": result}

    # -- method handlers ----------------------------------------------------

    def _handle_initialize(self, msg_id, params):
        if self.faults.no_init_reply:
            return None
        if self.faults.init_error_code is not None:
            return self._error(msg_id, self.faults.init_error_code, "initialize rejected by fault injection")
        return self._result(msg_id, {
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {"tools": {}},
            "serverInfo": {"name": self.ctx.label, "version": "1.0.0"},
        })

    def _handle_tools_list(self, msg_id):
        self._tools_pulls += 1
        if self.faults.fail_tools_after is not None and self._tools_pulls > self.faults.fail_tools_after:
            return self._error(msg_id, -32000, "tool listing unavailable")
        tools = []
        if not (self.faults.empty_tools_after is not None and self._tools_pulls > self.faults.empty_tools_after):
            for t in PROFILES[self.profile]:
                tools.append({"name": t.name, "description": t.description, "inputSchema": t.input_schema})
        return self._result(msg_id, {"tools": tools})

    def _handle_tools_call(self, msg_id, params):
        name = (params or {}).get("name")
        args = (params or {}).get("arguments") or {}
        tool = self.tools.get(name)
        if tool is None:
            return self._error(msg_id, -32602, f"unknown tool: {name}")
        try:
            with self._state_lock:
                payload = tool.handler(self.ctx, args)
            text = payload if isinstance(payload, str) else _dumps(payload)
            return self._result(msg_id, {"content": [{"type": "text", "text": text}], "isError": False})
        except ToolError as exc:
            return self._result(msg_id, {"content": [{"type": "text", "text": str(exc)}], "isError": True})
        except Exception as exc:  # handler bug: still a tool-level error, not a wire error
            return self._result(msg_id, {"content": [{"type": "text", "text": f"tool crashed: {exc}"}], "isError": True})

    def _dispatch(self, message):
        msg_id = message.get("id")
        method = message.get("method")
        params = message.get("params")
        if method == "initialize":
            return self._handle_initialize(msg_id, params)
        if method == "tools/list":
            return self._handle_tools_list(msg_id)
        if method == "tools/call":
            return self._handle_tools_call(msg_id, params)
        if msg_id is None:  # unknown notification: ignore
            return None
        return self._error(msg_id, -32601, f"method not found: {method}")

    # -- main loop ----------------------------------------------------------

    def _respond(self, message) -> None:
        response = self._dispatch(message)
        if response is not None:
            self._write(response)

    def serve_forever(self) -> None:
        for raw in sys.stdin:
            line = raw.strip()
            if not line:
                continue
            try:
                message = json.loads(line)
            except json.JSONDecodeError:
                self._write(self._error(None, -32700, "parse error"))
                continue
            if self.faults.shuffle_replies and message.get("method") == "tools/call":
                # Deterministic per-id delay so concurrent callers observe
                # out-of-order responses.
                delay = (zlib.crc32(str(message.get("id")).encode()) % 8) * 0.01
                threading.Timer(delay, self._respond, args=(message,)).start()
            else:
                self._respond(message)
