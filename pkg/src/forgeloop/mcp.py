"""Structured channel from inner-loop agents back to the active policy.

A small JSON-RPC 2.0 tool server: the policy defines the toolset (name,
description, JSON-Schema input contract, handler), agents call
``initialize`` / ``tools/list`` / ``tools/call`` over a per-run local Unix
socket with newline-delimited JSON framing. Arguments are schema-validated
before any handler runs; schema failures return error -32602 and unknown
methods or tools return -32601.

One extension method exists beyond the protocol core: ``result/emit``
carries an agent's final structured result. Keeping it on the same channel
means stdout is never parsed for semantics.

Sessions are per agent invocation: the invoker brackets each spawn with
``begin_session`` / ``end_session`` so every tool call is attributed to a
role and round. Calls outside any session are policy-level rejections.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import jsonschema

from forgeloop.errors import ForgeloopError

PROTOCOL_VERSION = "2025-06-18"
SERVER_INFO = {"name": "forgeloop", "version": "0.1.0"}

METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
PARSE_ERROR = -32700
INTERNAL_ERROR = -32603


class McpError(ForgeloopError):
    pass


class TransportUnavailable(McpError):
    pass


class HandlerError(McpError):
    """Policy-level rejection (unknown issue id, no active round, ...)."""


class InvalidToolset(McpError):
    pass


@dataclass(frozen=True)
class SessionContext:
    role: str
    round: int


# Handlers take (SessionContext, validated arguments) and return a payload.
ToolHandler = Callable[[SessionContext, dict], dict]


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    input_schema: dict
    handler: ToolHandler


@dataclass(frozen=True)
class ToolCall:
    tool: str
    arguments: dict
    call_id: object


@dataclass(frozen=True)
class ToolResult:
    call_id: object
    ok: bool
    payload: Optional[dict] = None
    error: Optional[str] = None


def validate_toolset(tools: list[ToolSpec]) -> None:
    names = [t.name for t in tools]
    if len(set(names)) != len(names):
        raise InvalidToolset(f"duplicate tool names: {names}")
    for t in tools:
        try:
            jsonschema.Draft202012Validator.check_schema(t.input_schema)
        except jsonschema.SchemaError as exc:
            raise InvalidToolset(f"tool {t.name} has an invalid input schema: {exc}") from None


def handle_call(toolset: dict[str, ToolSpec], call: ToolCall, ctx: SessionContext) -> ToolResult:
    """Validate against the tool's schema, then dispatch; the handler never
    runs on a call that failed validation."""
    spec = toolset[call.tool]
    validator = jsonschema.Draft202012Validator(spec.input_schema)
    errors = sorted(validator.iter_errors(call.arguments), key=lambda e: e.json_path)
    if errors:
        raise jsonschema.ValidationError(errors[0].message)
    try:
        payload = spec.handler(ctx, call.arguments)
    except HandlerError as exc:
        return ToolResult(call_id=call.call_id, ok=False, error=str(exc))
    return ToolResult(call_id=call.call_id, ok=True, payload=payload)


@dataclass(frozen=True)
class ToolLogEntry:
    tool: str
    arguments: dict
    ok: bool
    payload: Optional[dict]
    error: Optional[str]


@dataclass
class Session:
    role: str
    round: int
    allowed_tools: Optional[frozenset[str]] = None  # None = full toolset
    tool_calls: int = 0
    emitted_result: Optional[object] = None
    tool_log: list[ToolLogEntry] = field(default_factory=list)


class ToolServer:
    """Dispatch core plus an optional Unix-socket transport."""

    def __init__(self, tools: list[ToolSpec], ledger=None):
        validate_toolset(tools)
        self.tools: dict[str, ToolSpec] = {t.name: t for t in tools}
        self.ledger = ledger
        self._session: Optional[Session] = None
        self._lock = threading.Lock()
        self._server: Optional[socketserver.ThreadingUnixStreamServer] = None
        self._thread: Optional[threading.Thread] = None
        self.socket_path: Optional[str] = None

    # -- session management (invoker side) -----------------------------

    def begin_session(self, role: str, round_index: int, allowed_tools=None) -> Session:
        with self._lock:
            if self._session is not None:
                raise McpError("a session is already active; the pipeline is sequential")
            self._session = Session(
                role=role,
                round=round_index,
                allowed_tools=frozenset(allowed_tools) if allowed_tools is not None else None,
            )
            return self._session

    def end_session(self) -> Session:
        with self._lock:
            if self._session is None:
                raise McpError("no active session")
            done = self._session
            self._session = None
            return done

    # -- dispatch -------------------------------------------------------

    def _visible_tools(self, session: Optional[Session]) -> dict[str, ToolSpec]:
        if session is None or session.allowed_tools is None:
            return self.tools
        return {n: t for n, t in self.tools.items() if n in session.allowed_tools}

    def dispatch(self, request: dict) -> Optional[dict]:
        """Handle one JSON-RPC request object; None for notifications."""
        req_id = request.get("id")
        is_notification = "id" not in request

        def result(payload: dict) -> Optional[dict]:
            if is_notification:
                return None
            return {"jsonrpc": "2.0", "id": req_id, "result": payload}

        def error(code: int, message: str) -> Optional[dict]:
            if is_notification:
                return None
            return {"jsonrpc": "2.0", "id": req_id, "error": {"code": code, "message": message}}

        if request.get("jsonrpc") != "2.0" or "method" not in request:
            return error(PARSE_ERROR, "not a JSON-RPC 2.0 request")
        method = request["method"]
        params = request.get("params", {})
        with self._lock:
            session = self._session

        if method == "initialize":
            return result(
                {
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {}},
                    "serverInfo": dict(SERVER_INFO),
                }
            )

        if method == "tools/list":
            tools = [
                {"name": t.name, "description": t.description, "inputSchema": t.input_schema}
                for t in self._visible_tools(session).values()
            ]
            tools.sort(key=lambda t: t["name"])
            return result({"tools": tools})

        if method == "tools/call":
            name = params.get("name")
            arguments = params.get("arguments", {})
            if session is not None:
                session.tool_calls += 1
            visible = self._visible_tools(session)
            if name not in visible:
                return error(METHOD_NOT_FOUND, f"tool not found: {name}")
            ctx = SessionContext(
                role=session.role if session else "?",
                round=session.round if session else -1,
            )
            if session is None:
                tool_result = ToolResult(
                    call_id=req_id, ok=False, error="tool call outside any active round"
                )
            else:
                try:
                    tool_result = handle_call(visible, ToolCall(name, arguments, req_id), ctx)
                except jsonschema.ValidationError as exc:
                    self._record_tool_event(session, name, ok=False, error=f"invalid params: {exc.message}")
                    return error(INVALID_PARAMS, f"invalid params for {name}: {exc.message}")
            if session is not None:
                session.tool_log.append(
                    ToolLogEntry(
                        tool=name,
                        arguments=arguments,
                        ok=tool_result.ok,
                        payload=tool_result.payload,
                        error=tool_result.error,
                    )
                )
            self._record_tool_event(
                session, name, ok=tool_result.ok, error=tool_result.error
            )
            if tool_result.ok:
                return result({"ok": True, "payload": tool_result.payload})
            return result({"ok": False, "error": tool_result.error})

        if method == "result/emit":
            if session is None:
                return error(INTERNAL_ERROR, "result/emit outside any active session")
            session.emitted_result = params
            return result({"ok": True})

        return error(METHOD_NOT_FOUND, f"method not found: {method}")

    def _record_tool_event(self, session: Optional[Session], tool: str, ok: bool, error=None) -> None:
        if self.ledger is None:
            return
        payload = {
            "role": session.role if session else "?",
            "tool": tool,
            "ok": ok,
        }
        if error:
            payload["error"] = error
        self.ledger.append("tool_call", session.round if session else -1, payload)

    # -- Unix socket transport ------------------------------------------

    def serve(self, socket_path: str) -> None:
        """Bind the socket and answer requests in a background thread."""
        dispatcher = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    line = raw.decode("utf-8").strip()
                    if not line:
                        continue
                    try:
                        request = json.loads(line)
                    except json.JSONDecodeError:
                        response = {
                            "jsonrpc": "2.0",
                            "id": None,
                            "error": {"code": PARSE_ERROR, "message": "parse error"},
                        }
                    else:
                        response = dispatcher.dispatch(request)
                    if response is not None:
                        self.wfile.write((json.dumps(response, sort_keys=True) + "\n").encode())
                        self.wfile.flush()

        class Server(socketserver.ThreadingUnixStreamServer):
            daemon_threads = True

        try:
            self._server = Server(socket_path, Handler)
        except OSError as exc:
            raise TransportUnavailable(f"cannot bind tool endpoint {socket_path}: {exc}") from exc
        self.socket_path = socket_path
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def shutdown(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None


class ToolClient:
    """Line-framed JSON-RPC client used by the scripted stub."""

    def __init__(self, socket_path: str):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self._sock.connect(socket_path)
        except OSError as exc:
            raise TransportUnavailable(f"cannot reach tool endpoint {socket_path}: {exc}") from exc
        self._file = self._sock.makefile("rw", encoding="utf-8")
        self._next_id = 0

    def request(self, method: str, params: Optional[dict] = None) -> dict:
        self._next_id += 1
        doc = {"jsonrpc": "2.0", "id": self._next_id, "method": method}
        if params is not None:
            doc["params"] = params
        self._file.write(json.dumps(doc) + "\n")
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise McpError("tool endpoint closed the connection")
        return json.loads(line)

    def call_tool(self, name: str, arguments: dict) -> dict:
        return self.request("tools/call", {"name": name, "arguments": arguments})

    def emit_result(self, payload: dict) -> dict:
        return self.request("result/emit", payload)

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()
