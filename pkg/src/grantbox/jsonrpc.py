"""JSON-RPC 2.0 message model and newline-delimited framing.

The bridge relays payload bytes verbatim; this module is the typed view used
by sessions and tests, plus the line buffer that reassembles partial reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import ProtocolError


@dataclass
class JsonRpcMessage:
    """One request, notification or response."""

    id: Optional[object] = None
    method: Optional[str] = None
    params: Any = None
    result: Any = None
    error: Optional[dict] = None
    _has_result: bool = field(default=False, repr=False)

    @property
    def is_request(self) -> bool:
        return self.method is not None and self.id is not None

    @property
    def is_notification(self) -> bool:
        return self.method is not None and self.id is None

    @property
    def is_response(self) -> bool:
        return self.method is None and (self._has_result or self.error is not None)

    def to_dict(self) -> dict:
        out: dict = {"jsonrpc": "2.0"}
        if self.method is not None:
            out["method"] = self.method
            if self.params is not None:
                out["params"] = self.params
            if self.id is not None:
                out["id"] = self.id
            return out
        out["id"] = self.id
        if self.error is not None:
            out["error"] = self.error
        else:
            out["result"] = self.result
        return out

    def encode(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_dict(cls, obj: dict) -> "JsonRpcMessage":
        if not isinstance(obj, dict):
            raise ProtocolError(f"JSON-RPC message must be an object, got {type(obj).__name__}")
        has_result = "result" in obj
        error = obj.get("error")
        if has_result and error is not None:
            raise ProtocolError("response carries both result and error")
        if error is not None and not isinstance(error, dict):
            raise ProtocolError("error member must be an object")
        return cls(
            id=obj.get("id"),
            method=obj.get("method"),
            params=obj.get("params"),
            result=obj.get("result"),
            error=error,
            _has_result=has_result,
        )

    @classmethod
    def decode(cls, data: bytes | str) -> "JsonRpcMessage":
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        try:
            obj = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"invalid JSON-RPC payload: {exc}") from exc
        return cls.from_dict(obj)


def request(msg_id, method: str, params=None) -> JsonRpcMessage:
    return JsonRpcMessage(id=msg_id, method=method, params=params)


def notification(method: str, params=None) -> JsonRpcMessage:
    return JsonRpcMessage(id=None, method=method, params=params)


class LineBuffer:
    """Reassembles newline-delimited frames from arbitrary byte chunks."""

    def __init__(self):
        self._buf = b""

    def feed(self, chunk: bytes):
        """Returns the list of complete frames in arrival order."""
        self._buf += chunk
        lines = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            line = self._buf[:nl]
            self._buf = self._buf[nl + 1:]
            if line.strip():
                lines.append(line)
        return lines

    @property
    def pending(self) -> bytes:
        return self._buf
