"""Model access: a deterministic scripted backend and an HTTP chat backend.

Both backends expose one operation, ``complete(messages, tools)``, returning
the assistant turn (text and/or tool calls). The scripted backend replays a
fixed turn list for byte-reproducible runs; the HTTP backend speaks the
OpenAI-compatible chat-completions dialect with bounded retry. Credentials
come from ``GRANTBOX_MODEL_<PROVIDER>_KEY`` and are never logged.
"""

from __future__ import annotations

import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from .clock import SYSTEM_CLOCK
from .errors import ConfigError, ModelBackendError, ScriptExhaustedError

KEY_ENV_TEMPLATE = "GRANTBOX_MODEL_{provider}_KEY"
URL_ENV_TEMPLATE = "GRANTBOX_MODEL_{provider}_URL"
_DEFAULT_BASE_URLS = {"openai": "https://api.openai.com/v1"}
_RETRIABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    name: str
    arguments: dict
    arguments_json_error: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"call_id": self.call_id, "name": self.name, "arguments": self.arguments}
        if self.arguments_json_error:
            d["arguments_json_error"] = self.arguments_json_error
        return d


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant | tool
    content: str = ""
    tool_calls: tuple = ()
    tool_call_id: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"role": self.role, "content": self.content}
        if self.tool_calls:
            d["tool_calls"] = [c.to_dict() for c in self.tool_calls]
        if self.tool_call_id is not None:
            d["tool_call_id"] = self.tool_call_id
        return d


@dataclass(frozen=True)
class ModelResponse:
    message: ChatMessage
    finish_reason: str = "stop"
    model: str = ""

    @property
    def tool_calls(self) -> tuple:
        return self.message.tool_calls


def get_api_key(provider: str) -> str:
    env = KEY_ENV_TEMPLATE.format(provider=provider.upper().replace("-", "_"))
    key = os.environ.get(env)
    if not key:
        raise ConfigError(f"missing credential: set {env}")
    return key


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

class ScriptedModel:
    """Replays a fixed list of assistant turns; raises when the script runs out.

    Script file format::

        {"name": "...", "turns": [
            {"content": "...", "tool_calls": [{"name": "...", "arguments": {...}}]},
            ...
        ]}

    A turn may carry ``expect_last_contains`` to assert on the most recent
    message the pipeline fed in, which pins down context-construction bugs.
    """

    def __init__(self, turns: list[dict], name: str = "scripted"):
        self.name = name
        self._turns = list(turns)
        self._cursor = 0
        self._call_counter = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedModel":
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict) or "turns" not in doc:
            raise ConfigError(f"script {path} must be an object with a 'turns' list")
        return cls(doc["turns"], name=doc.get("name", Path(path).stem))

    @property
    def remaining(self) -> int:
        return len(self._turns) - self._cursor

    def complete(self, messages: list[ChatMessage], tools: list[dict],
                 temperature: float = 0.0) -> ModelResponse:
        if self._cursor >= len(self._turns):
            raise ScriptExhaustedError(
                f"script {self.name!r} exhausted after {len(self._turns)} turns")
        turn = self._turns[self._cursor]
        self._cursor += 1
        expect = turn.get("expect_last_contains")
        if expect is not None:
            last = messages[-1].content if messages else ""
            if expect not in last:
                raise ModelBackendError(
                    f"script {self.name!r} turn {self._cursor}: expected last message "
                    f"to contain {expect!r}, got {last[:200]!r}")
        calls = []
        for spec in turn.get("tool_calls", []):
            self._call_counter += 1
            calls.append(ToolCall(call_id=f"call_{self._call_counter}",
                                  name=spec["name"], arguments=dict(spec.get("arguments", {}))))
        message = ChatMessage(role="assistant", content=turn.get("content", ""),
                              tool_calls=tuple(calls))
        reason = "tool_calls" if calls else "stop"
        return ModelResponse(message=message, finish_reason=reason, model=self.name)


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backend
# ---------------------------------------------------------------------------

def messages_to_wire(messages: list[ChatMessage]) -> list[dict]:
    wire = []
    for m in messages:
        entry: dict = {"role": m.role, "content": m.content}
        if m.role == "assistant" and m.tool_calls:
            entry["tool_calls"] = [
                {"id": c.call_id, "type": "function",
                 "function": {"name": c.name, "arguments": json.dumps(c.arguments)}}
                for c in m.tool_calls
            ]
        if m.role == "tool" and m.tool_call_id is not None:
            entry["tool_call_id"] = m.tool_call_id
        wire.append(entry)
    return wire


def tools_to_wire(tools: list[dict]) -> list[dict]:
    return [
        {"type": "function",
         "function": {"name": t["name"], "description": t.get("description", ""),
                      "parameters": t.get("parameters") or {"type": "object"}}}
        for t in tools
    ]


def parse_wire_response(doc: dict, model: str = "") -> ModelResponse:
    try:
        choice = doc["choices"][0]
        raw = choice["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ModelBackendError(f"malformed completion response: {exc}") from exc
    calls = []
    for i, rc in enumerate(raw.get("tool_calls") or [], start=1):
        fn = rc.get("function", {})
        args_raw = fn.get("arguments", "{}")
        error = None
        try:
            args = json.loads(args_raw) if isinstance(args_raw, str) else dict(args_raw)
            if not isinstance(args, dict):
                args, error = {}, f"arguments not an object: {args_raw!r}"
        except (json.JSONDecodeError, TypeError) as exc:
            args, error = {}, f"unparseable arguments: {exc}"
        calls.append(ToolCall(call_id=rc.get("id") or f"call_{i}", name=fn.get("name", ""),
                              arguments=args, arguments_json_error=error))
    message = ChatMessage(role="assistant", content=raw.get("content") or "",
                          tool_calls=tuple(calls))
    return ModelResponse(message=message,
                         finish_reason=choice.get("finish_reason", "stop"),
                         model=doc.get("model", model))


class HttpChatModel:
    """Chat-completions client with exponential backoff on transient failures."""

    def __init__(self, provider: str, model: str, base_url: Optional[str] = None,
                 timeout: float = 120.0, max_retries: int = 3, clock=SYSTEM_CLOCK,
                 api_key: Optional[str] = None):
        self.provider = provider
        self.model = model
        env_url = os.environ.get(URL_ENV_TEMPLATE.format(provider=provider.upper().replace("-", "_")))
        self.base_url = (base_url or env_url or _DEFAULT_BASE_URLS.get(provider) or "").rstrip("/")
        if not self.base_url:
            raise ConfigError(
                f"no base URL for provider {provider!r}: set "
                + URL_ENV_TEMPLATE.format(provider=provider.upper().replace("-", "_")))
        self.timeout = timeout
        self.max_retries = max_retries
        self.clock = clock
        self._api_key = api_key if api_key is not None else get_api_key(provider)
        self.name = f"{provider}/{model}"

    def complete(self, messages: list[ChatMessage], tools: list[dict],
                 temperature: float = 0.0) -> ModelResponse:
        payload = {
            "model": self.model,
            "messages": messages_to_wire(messages),
            "temperature": temperature,
        }
        if tools:
            payload["tools"] = tools_to_wire(tools)
            payload["tool_choice"] = "auto"
        body = json.dumps(payload).encode()
        last_error = "no attempts made"
        for attempt in range(1, self.max_retries + 1):
            request = urllib.request.Request(
                self.base_url + "/chat/completions", data=body, method="POST",
                headers={"Content-Type": "application/json",
                         "Authorization": f"Bearer {self._api_key}"})
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    doc = json.loads(resp.read().decode())
                return parse_wire_response(doc, model=self.model)
            except urllib.error.HTTPError as exc:
                detail = exc.read().decode(errors="replace")[:300]
                last_error = f"HTTP {exc.code}: {detail}"
                if exc.code not in _RETRIABLE_STATUS:
                    raise ModelBackendError(f"{self.name}: {last_error}")
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last_error = str(exc)
            if attempt < self.max_retries:
                self.clock.sleep(2 ** (attempt - 1))
        raise ModelBackendError(f"{self.name}: giving up after {self.max_retries} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Validation and factory
# ---------------------------------------------------------------------------

def validate_tool_calls(calls, tools: list[dict]) -> list[str]:
    """Flag hallucinated tool names and schema-violating arguments.

    Returns human-readable flags; the caller records them without raising so
    misbehaving models are observed rather than crashed on.
    """
    by_name = {t["name"]: t for t in tools}
    flags = []
    for call in calls:
        if call.arguments_json_error:
            flags.append(f"{call.name}: {call.arguments_json_error}")
        tool = by_name.get(call.name)
        if tool is None:
            flags.append(f"unknown tool: {call.name}")
            continue
        schema = tool.get("parameters")
        if not schema:
            continue
        try:
            jsonschema.validate(call.arguments, schema)
        except jsonschema.ValidationError as exc:
            flags.append(f"{call.name}: schema violation: {exc.message}")
        except jsonschema.SchemaError:
            pass
    return flags


def create_model(identifier: str, clock=SYSTEM_CLOCK):
    """Build a backend from a CLI identifier.

    ``scripted:<path>`` loads a script file; ``<provider>/<model>`` builds the
    HTTP backend (credentials and optional base URL from the environment).
    """
    if identifier.startswith("scripted:"):
        return ScriptedModel.from_file(identifier[len("scripted:"):])
    if "/" in identifier:
        provider, model = identifier.split("/", 1)
        return HttpChatModel(provider, model, clock=clock)
    raise ConfigError(
        f"model identifier {identifier!r} not understood: use scripted:<path> or <provider>/<model>")
