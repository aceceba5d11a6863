"""Outbound network interception: per-server forward proxies with a shared log.

Each deployed server gets its own proxy listener port, injected through the
standard proxy environment variables, so every outbound request is attributed
to the server that made it without packet inspection. Plain HTTP requests are
recorded with redacted headers and body digests; CONNECT tunnels are recorded
at connection granularity (no decryption).
"""

from __future__ import annotations

import hashlib
import http.client
import select
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import urlsplit

from .clock import SYSTEM_CLOCK
from .serialization import canonical_dumps, write_jsonl

REDACTED_HEADERS = {"authorization", "cookie", "set-cookie", "x-api-key", "proxy-authorization"}
_HOP_BY_HOP = {"connection", "proxy-connection", "keep-alive", "transfer-encoding",
               "te", "trailer", "upgrade", "proxy-authenticate"}


def _redact(headers: dict) -> dict:
    return {k: ("[REDACTED]" if k.lower() in REDACTED_HEADERS else v) for k, v in headers.items()}


def _digest(body: bytes) -> Optional[str]:
    return hashlib.sha256(body).hexdigest() if body else None


@dataclass(frozen=True)
class OutboundRecord:
    record_id: int
    server: str
    method: str
    scheme: str
    host: str
    port: int
    path: str
    status: Optional[int]
    request_headers: dict
    request_body_digest: Optional[str]
    response_body_digest: Optional[str]
    request_bytes: int
    response_bytes: int
    started_at: float
    duration: float
    case_id: Optional[str] = None
    detail: str = ""

    @property
    def url(self) -> str:
        default = {"http": 80, "https": 443}.get(self.scheme)
        netloc = self.host if self.port == default else f"{self.host}:{self.port}"
        return f"{self.scheme}://{netloc}{self.path}"

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "server": self.server,
            "method": self.method,
            "url": self.url,
            "scheme": self.scheme,
            "host": self.host,
            "port": self.port,
            "path": self.path,
            "status": self.status,
            "request_headers": self.request_headers,
            "request_body_digest": self.request_body_digest,
            "response_body_digest": self.response_body_digest,
            "request_bytes": self.request_bytes,
            "response_bytes": self.response_bytes,
            "started_at": self.started_at,
            "duration": self.duration,
            "case_id": self.case_id,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class LogFilter:
    server: Optional[str] = None
    host: Optional[str] = None
    method: Optional[str] = None
    case_id: Optional[str] = None
    since: Optional[float] = None
    path_contains: Optional[str] = None

    def matches(self, r: OutboundRecord) -> bool:
        if self.server is not None and r.server != self.server:
            return False
        if self.host is not None and r.host != self.host:
            return False
        if self.method is not None and r.method != self.method:
            return False
        if self.case_id is not None and r.case_id != self.case_id:
            return False
        if self.since is not None and r.started_at < self.since:
            return False
        if self.path_contains is not None and self.path_contains not in r.path:
            return False
        return True


@dataclass
class _Listener:
    server_name: str
    httpd: ThreadingHTTPServer
    thread: threading.Thread
    port: int


class Interceptor:
    """Starts proxy listeners on demand and accumulates the outbound log."""

    def __init__(self, log_path=None, clock=SYSTEM_CLOCK, connect_timeout: float = 10.0):
        self.log_path = log_path
        self.clock = clock
        self.connect_timeout = connect_timeout
        self.records: list[OutboundRecord] = []
        self._listeners: dict[str, _Listener] = {}
        self._lock = threading.Lock()
        self._next_id = 0
        self._case_id: Optional[str] = None
        self._running = True

    # -- server registration -------------------------------------------------

    def register_server(self, server_name: str) -> str:
        """Return the proxy URL for a server, starting its listener if needed."""
        with self._lock:
            if not self._running:
                raise RuntimeError("interceptor is stopped")
            existing = self._listeners.get(server_name)
            if existing is not None:
                return f"http://127.0.0.1:{existing.port}"
        handler = _make_handler(self, server_name)
        httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        httpd.daemon_threads = True
        thread = threading.Thread(target=lambda: httpd.serve_forever(poll_interval=0.05),
                                  name=f"proxy-{server_name}", daemon=True)
        thread.start()
        listener = _Listener(server_name, httpd, thread, httpd.server_address[1])
        with self._lock:
            self._listeners[server_name] = listener
        return f"http://127.0.0.1:{listener.port}"

    def proxy_port(self, server_name: str) -> Optional[int]:
        with self._lock:
            listener = self._listeners.get(server_name)
            return listener.port if listener else None

    def stop(self) -> None:
        with self._lock:
            listeners = list(self._listeners.values())
            self._listeners.clear()
            self._running = False
        for listener in listeners:
            listener.httpd.shutdown()
            listener.httpd.server_close()

    # -- case attribution ----------------------------------------------------

    def attach_to_case(self, case_id: Optional[str]) -> None:
        with self._lock:
            self._case_id = case_id

    class _CaseScope:
        def __init__(self, interceptor, case_id):
            self.interceptor = interceptor
            self.case_id = case_id

        def __enter__(self):
            self.interceptor.attach_to_case(self.case_id)
            return self.interceptor

        def __exit__(self, *exc):
            self.interceptor.attach_to_case(None)
            return False

    def case_scope(self, case_id: str) -> "_CaseScope":
        return Interceptor._CaseScope(self, case_id)

    # -- log -----------------------------------------------------------------

    def _record(self, **kw) -> OutboundRecord:
        with self._lock:
            self._next_id += 1
            record = OutboundRecord(record_id=self._next_id, case_id=self._case_id, **kw)
            self.records.append(record)
        if self.log_path is not None:
            with self._lock:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_dumps(record.to_dict()) + "\n")
        return record

    def query_log(self, log_filter: Optional[LogFilter] = None) -> list[OutboundRecord]:
        with self._lock:
            records = list(self.records)
        if log_filter is None:
            return records
        return [r for r in records if log_filter.matches(r)]

    def export_log(self, path) -> None:
        with self._lock:
            rows = [r.to_dict() for r in self.records]
        write_jsonl(path, rows)


# ---------------------------------------------------------------------------
# Proxy handler
# ---------------------------------------------------------------------------

def _make_handler(interceptor: Interceptor, server_name: str):
    class ProxyHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _read_body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def _forward(self):
            started = interceptor.clock.time()
            t0 = interceptor.clock.monotonic()
            parts = urlsplit(self.path)
            if not parts.scheme or not parts.hostname:
                self.send_error(400, "proxy requires absolute-form request URI")
                return
            host = parts.hostname
            port = parts.port or (443 if parts.scheme == "https" else 80)
            path = parts.path or "/"
            if parts.query:
                path += "?" + parts.query
            body = self._read_body()
            out_headers = {k: v for k, v in self.headers.items()
                           if k.lower() not in _HOP_BY_HOP}
            out_headers["Host"] = self.headers.get("Host") or parts.netloc
            status = None
            resp_body = b""
            resp_headers = []
            detail = ""
            try:
                conn = http.client.HTTPConnection(host, port, timeout=interceptor.connect_timeout)
                conn.request(self.command, path, body=body or None, headers=out_headers)
                resp = conn.getresponse()
                status = resp.status
                resp_body = resp.read()
                resp_headers = [(k, v) for k, v in resp.getheaders()
                                if k.lower() not in _HOP_BY_HOP and k.lower() != "content-length"]
                conn.close()
            except OSError as exc:
                detail = str(exc)
            # Record before replying so the log is complete the moment the
            # client sees its response.
            interceptor._record(
                server=server_name, method=self.command, scheme=parts.scheme,
                host=host, port=port, path=path, status=status,
                request_headers=_redact(dict(self.headers.items())),
                request_body_digest=_digest(body), response_body_digest=_digest(resp_body),
                request_bytes=len(body), response_bytes=len(resp_body),
                started_at=started, duration=interceptor.clock.monotonic() - t0,
                detail=detail,
            )
            try:
                if status is None:
                    self.send_error(502, "upstream unreachable")
                else:
                    self.send_response(status)
                    for k, v in resp_headers:
                        self.send_header(k, v)
                    self.send_header("Content-Length", str(len(resp_body)))
                    self.end_headers()
                    self.wfile.write(resp_body)
            except OSError:
                pass

        def do_GET(self):
            self._forward()

        def do_POST(self):
            self._forward()

        def do_PUT(self):
            self._forward()

        def do_DELETE(self):
            self._forward()

        def do_HEAD(self):
            self._forward()

        def do_PATCH(self):
            self._forward()

        def do_CONNECT(self):
            started = interceptor.clock.time()
            t0 = interceptor.clock.monotonic()
            host, _, port_s = self.path.partition(":")
            port = int(port_s or 443)
            sent = received = 0
            detail = ""
            try:
                upstream = socket.create_connection((host, port), timeout=interceptor.connect_timeout)
            except OSError as exc:
                detail = str(exc)
                interceptor._record(
                    server=server_name, method="CONNECT", scheme="https", host=host,
                    port=port, path="", status=None,
                    request_headers=_redact(dict(self.headers.items())),
                    request_body_digest=None, response_body_digest=None,
                    request_bytes=0, response_bytes=0, started_at=started,
                    duration=interceptor.clock.monotonic() - t0, detail=detail,
                )
                self.send_error(502, "tunnel target unreachable")
                return
            self.send_response(200, "Connection established")
            self.end_headers()
            client = self.connection
            client.setblocking(False)
            upstream.setblocking(False)
            try:
                open_ends = 2
                while open_ends:
                    readable, _, _ = select.select([client, upstream], [], [], 1.0)
                    if not readable:
                        continue
                    done = False
                    for sock in readable:
                        try:
                            data = sock.recv(65536)
                        except OSError:
                            done = True
                            break
                        if not data:
                            done = True
                            break
                        if sock is client:
                            upstream.sendall(data)
                            sent += len(data)
                        else:
                            client.sendall(data)
                            received += len(data)
                    if done:
                        break
            finally:
                upstream.close()
            interceptor._record(
                server=server_name, method="CONNECT", scheme="https", host=host,
                port=port, path="", status=200,
                request_headers=_redact(dict(self.headers.items())),
                request_body_digest=None, response_body_digest=None,
                request_bytes=sent, response_bytes=received, started_at=started,
                duration=interceptor.clock.monotonic() - t0, detail="tunnel",
            )
            self.close_connection = True

    return ProxyHandler
