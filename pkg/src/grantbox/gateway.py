"""Stdio-to-SSE bridge and the uniform MCP client.

A ``BridgeHost`` exposes every bridged stdio server under
``GET /servers/<name>/sse`` (server-to-client stream) and
``POST /servers/<name>/message`` (client-to-server channel). Payloads are
relayed verbatim in both directions: the bytes a caller posts are the bytes
the server reads, and each server stdout line becomes exactly one SSE
``data:`` frame.

Sessions multiplex concurrent in-flight calls over one transport by pairing
response ids to request ids; writes to a server's stdin are serialized.
"""

from __future__ import annotations

import http.client
import queue
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import urlsplit

from .errors import BridgeStartError, ProtocolError, SessionError, UnknownToolError
from .jsonrpc import JsonRpcMessage, LineBuffer

DEFAULT_INIT_TIMEOUT = 10.0
DEFAULT_CALL_TIMEOUT = 60.0
PROTOCOL_VERSION = "2025-03-26"


def qualified_tool_name(server: str, tool: str) -> str:
    """Model-facing name: server and tool joined so names never collide."""
    return f"{server}__{tool}"


def split_qualified(name: str) -> tuple[str, str]:
    server, sep, tool = name.partition("__")
    if not sep or not server or not tool:
        raise ValueError(f"not a qualified tool name: {name!r}")
    return server, tool


@dataclass(frozen=True)
class ToolDescriptor:
    """A tool as advertised by a server over MCP."""

    server: str
    name: str
    description: str
    input_schema: dict

    @property
    def qualified(self) -> str:
        return qualified_tool_name(self.server, self.name)

    def to_dict(self) -> dict:
        return {
            "server": self.server,
            "name": self.name,
            "description": self.description,
            "input_schema": self.input_schema,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolDescriptor":
        return cls(d["server"], d["name"], d.get("description", ""), d.get("input_schema", {}))


@dataclass
class ToolResult:
    """Result payload of a tools/call, returned unmodified."""

    content: list
    is_error: bool
    raw: Any = None

    @property
    def text(self) -> str:
        parts = [c.get("text", "") for c in self.content if isinstance(c, dict) and c.get("type") == "text"]
        return "\n".join(parts)


@dataclass(frozen=True)
class BridgeEndpoint:
    server: str
    base_path: str          # e.g. /servers/echo
    base_url: str           # e.g. http://127.0.0.1:40123/servers/echo
    external: bool = False  # True for servers that already speak SSE themselves

    @property
    def sse_url(self) -> str:
        return self.base_url + "/sse"

    @property
    def message_url(self) -> str:
        return self.base_url + "/message"


# ---------------------------------------------------------------------------
# Bridge (server side)
# ---------------------------------------------------------------------------

class _StdioBridge:
    """Relays between one child process's stdio and any number of SSE subscribers."""

    def __init__(self, name: str, process):
        self.name = name
        self.process = process
        self._write_lock = threading.Lock()
        self._subs_lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []
        self._closed = False
        self._reader = threading.Thread(target=self._pump, name=f"bridge-{name}", daemon=True)

    def start(self) -> None:
        self._reader.start()

    def _pump(self) -> None:
        buf = LineBuffer()
        stream = self.process.stdout
        while True:
            chunk = stream.read1(65536) if hasattr(stream, "read1") else stream.read(1)
            if not chunk:
                break
            for line in buf.feed(chunk):
                self._broadcast(line)
        self._closed = True
        self._broadcast(None)

    def _broadcast(self, line: Optional[bytes]) -> None:
        with self._subs_lock:
            for q in list(self._subscribers):
                q.put(line)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._subs_lock:
            self._subscribers.append(q)
        if self._closed:
            q.put(None)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._subs_lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def send_to_server(self, payload: bytes) -> None:
        if self._closed or self.process.poll() is not None:
            raise BridgeStartError(self.name, "stdio streams closed")
        with self._write_lock:
            self.process.stdin.write(payload.rstrip(b"\n") + b"\n")
            self.process.stdin.flush()

    def close(self) -> None:
        self._closed = True
        self._broadcast(None)


class _BridgeRequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    host: "BridgeHost" = None  # set by BridgeHost

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    def _route(self):
        parts = [p for p in self.path.split("/") if p]
        if len(parts) != 3 or parts[0] != "servers":
            return None, None
        bridge = self.host._bridges.get(parts[1])
        return bridge, parts[2]

    def do_GET(self):
        bridge, channel = self._route()
        if bridge is None or channel != "sse":
            self.send_error(404)
            return
        # Subscribe before the 200 goes out: once the client sees headers it
        # may immediately POST, and replies broadcast pre-subscription are lost.
        sub = bridge.subscribe()
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            # Conventional first frame: tell the client where to post messages.
            self.wfile.write(f"event: endpoint\ndata: /servers/{bridge.name}/message\n\n".encode())
            self.wfile.flush()
            while True:
                line = sub.get()
                if line is None:
                    break
                self.wfile.write(b"data: " + line + b"\n\n")
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            bridge.unsubscribe(sub)

    def do_POST(self):
        bridge, channel = self._route()
        if bridge is None or channel != "message":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        if b"\n" in body.rstrip(b"\n"):
            self._reply(400, b"payload must be a single JSON-RPC message")
            return
        try:
            bridge.send_to_server(body)
        except BridgeStartError as exc:
            self._reply(502, str(exc).encode())
            return
        self._reply(202, b"accepted")

    def _reply(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class BridgeHost:
    """HTTP host multiplexing any number of per-server bridges."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._host = host
        self._requested_port = port
        self._bridges: dict[str, _StdioBridge] = {}
        self._server: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        handler = type("BoundHandler", (_BridgeRequestHandler,), {"host": self})
        try:
            self._server = ThreadingHTTPServer((self._host, self._requested_port), handler)
        except OSError as exc:
            raise BridgeStartError("<bridge-host>", f"port unavailable: {exc}") from exc
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=lambda: self._server.serve_forever(poll_interval=0.05),
                                        name="bridge-host", daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://{self._host}:{self.port}"

    def start_bridge(self, handle, transport: str = "stdio") -> BridgeEndpoint:
        """Bridge a running server; returns its endpoint descriptor.

        ``handle`` needs ``.name`` and, for stdio, ``.process`` with attached
        pipes. For sse-native servers the endpoint points at the server's own
        port and nothing is proxied.
        """
        if self._server is None:
            raise BridgeStartError(getattr(handle, "name", "?"), "bridge host not started")
        name = handle.name
        if transport == "sse":
            port = getattr(handle, "port", None)
            if port is None:
                raise BridgeStartError(name, "sse server declares no port")
            return BridgeEndpoint(name, "", f"http://127.0.0.1:{port}", external=True)
        proc = getattr(handle, "process", None)
        if proc is None or proc.poll() is not None or proc.stdin is None or proc.stdout is None:
            raise BridgeStartError(name, "stdio streams closed")
        if proc.stdin.closed or proc.stdout.closed:
            raise BridgeStartError(name, "stdio streams closed")
        old = self._bridges.get(name)
        if old is not None:
            old.close()
        bridge = _StdioBridge(name, proc)
        bridge.start()
        self._bridges[name] = bridge
        base_path = f"/servers/{name}"
        return BridgeEndpoint(name, base_path, self.base_url + base_path)

    def stop_bridge(self, name: str) -> None:
        bridge = self._bridges.pop(name, None)
        if bridge is not None:
            bridge.close()

    def stop(self) -> None:
        for name in list(self._bridges):
            self.stop_bridge(name)
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None


# ---------------------------------------------------------------------------
# Transports (client side)
# ---------------------------------------------------------------------------

class StdioTransport:
    """Client transport speaking newline-delimited JSON-RPC on a process's pipes."""

    kind = "stdio"

    def __init__(self, process):
        self._proc = process
        self._write_lock = threading.Lock()
        self._on_raw: Optional[Callable[[bytes], None]] = None
        self._thread: Optional[threading.Thread] = None
        self.closed = False

    def start(self, on_raw: Callable[[bytes], None]) -> None:
        self._on_raw = on_raw
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def _pump(self) -> None:
        buf = LineBuffer()
        stream = self._proc.stdout
        while True:
            chunk = stream.read1(65536) if hasattr(stream, "read1") else stream.read(1)
            if not chunk:
                break
            for line in buf.feed(chunk):
                self._on_raw(line)
        self.closed = True

    def send(self, raw: bytes) -> None:
        if self.closed or self._proc.poll() is not None:
            raise SessionError("stdio transport closed")
        with self._write_lock:
            self._proc.stdin.write(raw.rstrip(b"\n") + b"\n")
            self._proc.stdin.flush()

    def close(self) -> None:
        self.closed = True


class SseTransport:
    """Client transport over a bridge endpoint: SSE down, POST up."""

    kind = "sse"

    def __init__(self, endpoint: BridgeEndpoint):
        self.endpoint = endpoint
        u = urlsplit(endpoint.base_url)
        self._netloc = (u.hostname, u.port)
        self._sse_path = (u.path or "") + "/sse"
        self._message_path = (u.path or "") + "/message"
        self._conn: Optional[http.client.HTTPConnection] = None
        self._thread: Optional[threading.Thread] = None
        self.closed = False

    def start(self, on_raw: Callable[[bytes], None]) -> None:
        self._conn = http.client.HTTPConnection(*self._netloc, timeout=30)
        self._conn.request("GET", self._sse_path, headers={"Accept": "text/event-stream"})
        resp = self._conn.getresponse()
        if resp.status != 200:
            raise SessionError(f"SSE channel refused: HTTP {resp.status}")
        self._thread = threading.Thread(target=self._pump, args=(resp, on_raw), daemon=True)
        self._thread.start()

    def _pump(self, resp, on_raw) -> None:
        event_type = "message"
        try:
            while True:
                line = resp.readline()
                if not line:
                    break
                line = line.rstrip(b"\r\n")
                if not line:
                    event_type = "message"
                    continue
                if line.startswith(b"event:"):
                    event_type = line[len(b"event:"):].strip().decode()
                elif line.startswith(b"data:"):
                    data = line[len(b"data:"):]
                    if data.startswith(b" "):
                        data = data[1:]
                    if event_type == "message":
                        on_raw(data)
        except (OSError, ValueError):
            pass
        self.closed = True

    def send(self, raw: bytes) -> None:
        if self.closed:
            raise SessionError("sse transport closed")
        conn = http.client.HTTPConnection(*self._netloc, timeout=30)
        try:
            conn.request("POST", self._message_path, body=raw, headers={"Content-Type": "application/json"})
            resp = conn.getresponse()
            body = resp.read()
            if resp.status not in (200, 202):
                raise SessionError(f"message channel rejected payload: HTTP {resp.status} {body[:200]!r}")
        finally:
            conn.close()

    def close(self) -> None:
        self.closed = True
        if self._conn is not None:
            try:
                self._conn.sock and self._conn.sock.close()
            except OSError:
                pass
            self._conn.close()


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

class _Pending:
    __slots__ = ("event", "message", "issued_at")

    def __init__(self, issued_at: float):
        self.event = threading.Event()
        self.message: Optional[JsonRpcMessage] = None
        self.issued_at = issued_at


@dataclass
class McpSession:
    """One initialized MCP conversation with a server."""

    session_id: str
    server: str
    transport: object
    state: str = "initializing"
    pending: dict = field(default_factory=dict)
    tools: Optional[list] = None

    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _next_id: int = field(default=1, repr=False)
    unmatched: list = field(default_factory=list, repr=False)

    # -- dispatch -----------------------------------------------------------

    def _on_raw(self, raw: bytes) -> None:
        try:
            msg = JsonRpcMessage.decode(raw)
        except ProtocolError:
            return
        if not msg.is_response:
            return  # server-initiated requests/notifications: relayed opaquely, not consumed
        with self._lock:
            waiter = self.pending.pop(msg.id, None)
        if waiter is None:
            self.unmatched.append(msg)
            return
        waiter.message = msg
        waiter.event.set()

    def _allocate(self, now: float):
        with self._lock:
            msg_id = self._next_id
            self._next_id += 1
            waiter = _Pending(now)
            self.pending[msg_id] = waiter
        return msg_id, waiter

    def request(self, method: str, params=None, timeout: float = DEFAULT_CALL_TIMEOUT) -> JsonRpcMessage:
        import time as _time

        start = _time.monotonic()
        msg_id, waiter = self._allocate(start)
        payload = JsonRpcMessage(id=msg_id, method=method, params=params).encode()
        try:
            self.transport.send(payload)
        except Exception:
            with self._lock:
                self.pending.pop(msg_id, None)
            self.mark_closed()
            raise
        if not waiter.event.wait(timeout):
            with self._lock:
                self.pending.pop(msg_id, None)
            raise SessionError(
                f"no response to {method} within {timeout}s", elapsed=_time.monotonic() - start
            )
        return waiter.message

    def notify(self, method: str, params=None) -> None:
        self.transport.send(JsonRpcMessage(id=None, method=method, params=params).encode())

    def mark_closed(self) -> None:
        with self._lock:
            for waiter in self.pending.values():
                waiter.event.set()
            self.pending.clear()
            self.state = "closed"

    def close(self) -> None:
        self.mark_closed()
        self.transport.close()


def initialize_session(endpoint, server: Optional[str] = None,
                       timeout: float = DEFAULT_INIT_TIMEOUT) -> McpSession:
    """Open a transport and run the MCP initialize exchange.

    ``endpoint`` is a ``BridgeEndpoint`` or an already-constructed transport.
    """
    if isinstance(endpoint, BridgeEndpoint):
        transport = SseTransport(endpoint)
        server = server or endpoint.server
    else:
        transport = endpoint
        server = server or "unknown"
    session = McpSession(session_id=uuid.uuid4().hex, server=server, transport=transport)
    transport.start(session._on_raw)
    reply = session.request("initialize", {
        "protocolVersion": PROTOCOL_VERSION,
        "capabilities": {},
        "clientInfo": {"name": "grantbox", "version": "0.1.0"},
    }, timeout=timeout)
    if reply.error is not None:
        session.close()
        raise ProtocolError(
            f"initialize rejected by {server}: {reply.error.get('message')}",
            code=reply.error.get("code"),
        )
    if not isinstance(reply.result, dict) or "protocolVersion" not in reply.result:
        session.close()
        raise ProtocolError(f"malformed initialize response from {server}")
    session.notify("notifications/initialized")
    session.state = "ready"
    return session


def list_tools(session: McpSession, timeout: float = DEFAULT_CALL_TIMEOUT) -> list[ToolDescriptor]:
    if session.state != "ready":
        raise SessionError(f"session for {session.server} is {session.state}, not ready")
    try:
        reply = session.request("tools/list", timeout=timeout)
    except SessionError:
        session.mark_closed()
        raise
    if reply.error is not None:
        raise ProtocolError(
            f"tools/list failed on {session.server}: {reply.error.get('message')}",
            code=reply.error.get("code"),
        )
    tools = []
    for t in (reply.result or {}).get("tools", []):
        tools.append(ToolDescriptor(
            server=session.server,
            name=t.get("name", ""),
            description=t.get("description", ""),
            input_schema=t.get("inputSchema", {}),
        ))
    session.tools = tools
    return tools


def call_tool(session: McpSession, name: str, args: dict,
              timeout: float = DEFAULT_CALL_TIMEOUT) -> ToolResult:
    if session.state != "ready":
        raise SessionError(f"session for {session.server} is {session.state}, not ready")
    if session.tools is None:
        list_tools(session)
    if name not in {t.name for t in session.tools}:
        raise UnknownToolError(f"tool {name!r} not advertised by server {session.server!r}")
    reply = session.request("tools/call", {"name": name, "arguments": args}, timeout=timeout)
    if reply.error is not None:
        # Server-side failure is data, not an exception: surface as an error result.
        return ToolResult(
            content=[{"type": "text", "text": f"server error {reply.error.get('code')}: {reply.error.get('message')}"}],
            is_error=True,
            raw=reply.to_dict(),
        )
    result = reply.result or {}
    return ToolResult(
        content=result.get("content", []),
        is_error=bool(result.get("isError", False)),
        raw=result,
    )
