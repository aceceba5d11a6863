"""Scripted playback, wire formats, retry policy and call validation."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from grantbox.errors import ConfigError, ModelBackendError, ScriptExhaustedError
from grantbox.llm import (
    ChatMessage,
    HttpChatModel,
    ScriptedModel,
    ToolCall,
    create_model,
    get_api_key,
    messages_to_wire,
    parse_wire_response,
    tools_to_wire,
    validate_tool_calls,
)


class TestScriptedModel:
    def test_playback_and_call_ids(self):
        model = ScriptedModel([
            {"content": "looking", "tool_calls": [{"name": "a__x", "arguments": {"q": 1}}]},
            {"tool_calls": [{"name": "b__y"}, {"name": "c__z"}]},
            {"content": "done"},
        ])
        first = model.complete([], [])
        assert first.finish_reason == "tool_calls"
        assert first.message.content == "looking"
        assert [(c.call_id, c.name) for c in first.tool_calls] == [("call_1", "a__x")]
        second = model.complete([], [])
        assert [c.call_id for c in second.tool_calls] == ["call_2", "call_3"]
        third = model.complete([], [])
        assert third.finish_reason == "stop"
        assert model.remaining == 0

    def test_exhaustion(self):
        model = ScriptedModel([{"content": "only"}])
        model.complete([], [])
        with pytest.raises(ScriptExhaustedError):
            model.complete([], [])

    def test_expect_last_contains(self):
        model = ScriptedModel([
            {"content": "ok", "expect_last_contains": "needle"},
            {"content": "ok", "expect_last_contains": "needle"},
        ])
        model.complete([ChatMessage(role="user", content="hay needle stack")], [])
        with pytest.raises(ModelBackendError, match="needle"):
            model.complete([ChatMessage(role="user", content="no match here")], [])

    def test_from_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps({"name": "demo", "turns": [{"content": "hi"}]}))
        model = ScriptedModel.from_file(path)
        assert model.name == "demo"
        assert model.complete([], []).message.content == "hi"

    def test_from_file_rejects_bad_shape(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(["not", "a", "script"]))
        with pytest.raises(ConfigError):
            ScriptedModel.from_file(path)


class TestWireFormat:
    def test_messages_to_wire(self):
        messages = [
            ChatMessage(role="system", content="be curt"),
            ChatMessage(role="assistant", content="",
                        tool_calls=(ToolCall("call_1", "fs__read_file", {"path": "a"}),)),
            ChatMessage(role="tool", content="data", tool_call_id="call_1"),
        ]
        wire = messages_to_wire(messages)
        assert wire[0] == {"role": "system", "content": "be curt"}
        call = wire[1]["tool_calls"][0]
        assert call["type"] == "function"
        assert call["function"]["name"] == "fs__read_file"
        assert json.loads(call["function"]["arguments"]) == {"path": "a"}
        assert wire[2]["tool_call_id"] == "call_1"

    def test_tools_to_wire(self):
        wire = tools_to_wire([{"name": "t", "description": "d",
                               "parameters": {"type": "object", "properties": {}}}])
        assert wire == [{"type": "function",
                         "function": {"name": "t", "description": "d",
                                      "parameters": {"type": "object", "properties": {}}}}]

    def test_parse_response_with_calls(self):
        doc = {"model": "m-1", "choices": [{"finish_reason": "tool_calls", "message": {
            "content": None,
            "tool_calls": [{"id": "abc", "function": {"name": "x", "arguments": '{"a": 2}'}}],
        }}]}
        resp = parse_wire_response(doc)
        assert resp.model == "m-1"
        assert resp.message.content == ""
        (call,) = resp.tool_calls
        assert (call.call_id, call.name, call.arguments) == ("abc", "x", {"a": 2})
        assert call.arguments_json_error is None

    def test_parse_response_bad_arguments_captured(self):
        doc = {"choices": [{"message": {"tool_calls": [
            {"function": {"name": "x", "arguments": "{not json"}},
            {"function": {"name": "y", "arguments": "[1,2]"}},
        ]}}]}
        calls = parse_wire_response(doc).tool_calls
        assert calls[0].arguments == {}
        assert "unparseable" in calls[0].arguments_json_error
        assert calls[1].arguments == {}
        assert "not an object" in calls[1].arguments_json_error

    def test_parse_response_malformed(self):
        with pytest.raises(ModelBackendError):
            parse_wire_response({"choices": []})
        with pytest.raises(ModelBackendError):
            parse_wire_response({})


class _FakeEndpoint:
    """Chat-completions stand-in that replays a scripted status sequence."""

    def __init__(self, plan):
        self.plan = list(plan)
        self.requests = []
        harness = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                harness.requests.append({
                    "path": self.path,
                    "auth": self.headers.get("Authorization"),
                    "body": json.loads(self.rfile.read(length) or b"{}"),
                })
                status = harness.plan.pop(0) if harness.plan else 200
                if status == 200:
                    payload = json.dumps({"model": "fake", "choices": [
                        {"finish_reason": "stop", "message": {"content": "pong"}}]}).encode()
                else:
                    payload = b'{"error": "scripted failure"}'
                self.send_response(status)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        threading.Thread(target=lambda: self.httpd.serve_forever(poll_interval=0.05),
                         daemon=True).start()
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()


class _SleepRecorder:
    def __init__(self):
        self.sleeps = []

    def sleep(self, seconds):
        self.sleeps.append(seconds)

    def now(self):
        return 0.0

    def monotonic(self):
        return 0.0


def _model(endpoint, **kw):
    kw.setdefault("api_key", "test-key")
    kw.setdefault("clock", _SleepRecorder())
    return HttpChatModel("testprov", "m1", base_url=endpoint.url, **kw)


class TestHttpChatModel:
    def test_success_and_auth_header(self):
        endpoint = _FakeEndpoint([200])
        try:
            model = _model(endpoint)
            resp = model.complete([ChatMessage(role="user", content="ping")],
                                  [{"name": "t", "parameters": {"type": "object"}}])
            assert resp.message.content == "pong"
            (request,) = endpoint.requests
            assert request["path"] == "/v1/chat/completions"
            assert request["auth"] == "Bearer test-key"
            assert request["body"]["tool_choice"] == "auto"
        finally:
            endpoint.stop()

    def test_transient_errors_retried_with_backoff(self):
        endpoint = _FakeEndpoint([500, 429, 200])
        try:
            clock = _SleepRecorder()
            resp = _model(endpoint, clock=clock).complete([], [])
            assert resp.message.content == "pong"
            assert len(endpoint.requests) == 3
            assert clock.sleeps == [1, 2]
        finally:
            endpoint.stop()

    def test_non_retriable_raises_immediately(self):
        endpoint = _FakeEndpoint([400])
        try:
            with pytest.raises(ModelBackendError, match="HTTP 400"):
                _model(endpoint).complete([], [])
            assert len(endpoint.requests) == 1
        finally:
            endpoint.stop()

    def test_gives_up_after_budget(self):
        endpoint = _FakeEndpoint([503, 503, 503])
        try:
            clock = _SleepRecorder()
            with pytest.raises(ModelBackendError, match="giving up"):
                _model(endpoint, clock=clock).complete([], [])
            assert len(endpoint.requests) == 3
            assert clock.sleeps == [1, 2]
        finally:
            endpoint.stop()

    def test_base_url_from_environment(self, monkeypatch):
        endpoint = _FakeEndpoint([200])
        try:
            monkeypatch.setenv("GRANTBOX_MODEL_TESTPROV_URL", endpoint.url)
            model = HttpChatModel("testprov", "m1", api_key="k")
            assert model.base_url == endpoint.url
        finally:
            endpoint.stop()

    def test_unknown_provider_needs_url(self, monkeypatch):
        monkeypatch.delenv("GRANTBOX_MODEL_MYSTERY_URL", raising=False)
        with pytest.raises(ConfigError, match="GRANTBOX_MODEL_MYSTERY_URL"):
            HttpChatModel("mystery", "m1", api_key="k")


class TestCredentials:
    def test_missing_key_names_env_var(self, monkeypatch):
        monkeypatch.delenv("GRANTBOX_MODEL_TESTPROV_KEY", raising=False)
        with pytest.raises(ConfigError, match="GRANTBOX_MODEL_TESTPROV_KEY"):
            get_api_key("testprov")

    def test_key_from_environment(self, monkeypatch):
        monkeypatch.setenv("GRANTBOX_MODEL_TESTPROV_KEY", "sk-x")
        assert get_api_key("testprov") == "sk-x"


class TestValidateToolCalls:
    TOOLS = [
        {"name": "fs__read_file",
         "parameters": {"type": "object", "properties": {"path": {"type": "string"}},
                        "required": ["path"]}},
        {"name": "db__ping", "parameters": None},
    ]

    def test_clean_call_no_flags(self):
        calls = [ToolCall("c1", "fs__read_file", {"path": "a.txt"})]
        assert validate_tool_calls(calls, self.TOOLS) == []

    def test_unknown_tool_flagged(self):
        calls = [ToolCall("c1", "fs__mystery", {})]
        assert validate_tool_calls(calls, self.TOOLS) == ["unknown tool: fs__mystery"]

    def test_schema_violations_flagged(self):
        calls = [ToolCall("c1", "fs__read_file", {}),
                 ToolCall("c2", "fs__read_file", {"path": 7})]
        flags = validate_tool_calls(calls, self.TOOLS)
        assert len(flags) == 2
        assert all("schema violation" in f for f in flags)

    def test_json_error_flagged(self):
        calls = [ToolCall("c1", "fs__read_file", {}, arguments_json_error="unparseable: x")]
        flags = validate_tool_calls(calls, self.TOOLS)
        assert any("unparseable" in f for f in flags)

    def test_schemaless_tool_skips_validation(self):
        calls = [ToolCall("c1", "db__ping", {"whatever": True})]
        assert validate_tool_calls(calls, self.TOOLS) == []


class TestFactory:
    def test_scripted(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"turns": []}))
        model = create_model(f"scripted:{path}")
        assert isinstance(model, ScriptedModel)

    def test_provider_model(self, monkeypatch):
        monkeypatch.setenv("GRANTBOX_MODEL_TESTPROV_URL", "http://127.0.0.1:1/v1")
        monkeypatch.setenv("GRANTBOX_MODEL_TESTPROV_KEY", "k")
        model = create_model("testprov/m9")
        assert isinstance(model, HttpChatModel)
        assert model.name == "testprov/m9"

    def test_unrecognized(self):
        with pytest.raises(ConfigError):
            create_model("gibberish")
