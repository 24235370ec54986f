"""Tool server: protocol conformance (golden transcripts), schema gating,
sessions, and the socket transport."""

import json
from pathlib import Path

import pytest

from forgeloop.mcp import (
    HandlerError,
    InvalidToolset,
    SessionContext,
    ToolCall,
    ToolClient,
    ToolServer,
    ToolSpec,
    handle_call,
    validate_toolset,
)
from forgeloop.policy import IssueTrackerPolicy

GOLDEN = Path(__file__).parent / "golden" / "mcp_transcript.json"


@pytest.fixture
def policy(toy_workspace):
    return IssueTrackerPolicy(toy_workspace, seed_task=False)


@pytest.fixture
def server(policy):
    return ToolServer(list(policy.toolset()))


def canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


GOLDEN_REQUESTS = [
    {"jsonrpc": "2.0", "id": 1, "method": "initialize", "params": {"protocolVersion": "2025-06-18"}},
    {"jsonrpc": "2.0", "id": 2, "method": "tools/list"},
    {
        "jsonrpc": "2.0",
        "id": 3,
        "method": "tools/call",
        "params": {
            "name": "file_issue",
            "arguments": {
                "title": "add continuous batching",
                "rationale": "static batching stalls the queue",
                "acceptance_criteria": ["checker passes", "throughput improves at rate 8"],
                "expected_impact": "high",
            },
        },
    },
    {
        "jsonrpc": "2.0",
        "id": 4,
        "method": "tools/call",
        "params": {
            "name": "file_issue",
            "arguments": {
                "title": "missing criteria",
                "rationale": "schema gate must reject this",
                "expected_impact": "low",
            },
        },
    },
    {
        "jsonrpc": "2.0",
        "id": 5,
        "method": "tools/call",
        "params": {"name": "update_issue_status", "arguments": {"issue_id": 99, "status": "done"}},
    },
    {"jsonrpc": "2.0", "id": 6, "method": "tools/call", "params": {"name": "no_such_tool", "arguments": {}}},
    {"jsonrpc": "2.0", "id": 7, "method": "resources/list"},
]


def run_transcript(server):
    server.begin_session("Implementer", 0)
    try:
        return [server.dispatch(req) for req in GOLDEN_REQUESTS]
    finally:
        server.end_session()


def test_golden_transcript_byte_stable(server):
    responses = run_transcript(server)
    expected = json.loads(GOLDEN.read_text(encoding="utf-8"))
    got_bytes = "\n".join(canonical(r) for r in responses)
    want_bytes = "\n".join(canonical(r) for r in expected)
    assert got_bytes == want_bytes


def test_transcript_error_codes(server):
    responses = run_transcript(server)
    by_id = {r["id"]: r for r in responses}
    assert by_id[3]["result"] == {"ok": True, "payload": {"issue_id": 1}}
    assert by_id[4]["error"]["code"] == -32602
    assert "acceptance_criteria" in by_id[4]["error"]["message"]
    assert by_id[5]["result"]["ok"] is False  # HandlerError: unknown issue id
    assert by_id[6]["error"]["code"] == -32601
    assert by_id[7]["error"]["code"] == -32601


def test_initialize_handshake(server):
    server.begin_session("Judge", 0)
    resp = server.dispatch({"jsonrpc": "2.0", "id": 1, "method": "initialize"})
    server.end_session()
    assert resp["result"]["protocolVersion"] == "2025-06-18"
    assert resp["result"]["capabilities"] == {"tools": {}}


def test_tools_list_shows_three_issue_tracker_tools(server):
    server.begin_session("Judge", 0)
    resp = server.dispatch({"jsonrpc": "2.0", "id": 1, "method": "tools/list"})
    server.end_session()
    names = [t["name"] for t in resp["result"]["tools"]]
    assert names == ["file_issue", "record_finding", "update_issue_status"]
    for tool in resp["result"]["tools"]:
        assert tool["inputSchema"]["type"] == "object"


def test_schema_gate_handler_never_runs_on_invalid(policy):
    calls = {"n": 0}

    def handler(ctx, args):
        calls["n"] += 1
        return {}

    spec = ToolSpec(
        name="probe",
        description="d",
        input_schema={
            "type": "object",
            "properties": {"x": {"type": "integer"}},
            "required": ["x"],
            "additionalProperties": False,
        },
        handler=handler,
    )
    server = ToolServer([spec])
    server.begin_session("Implementer", 0)
    bad = server.dispatch(
        {"jsonrpc": "2.0", "id": 1, "method": "tools/call", "params": {"name": "probe", "arguments": {}}}
    )
    good = server.dispatch(
        {"jsonrpc": "2.0", "id": 2, "method": "tools/call", "params": {"name": "probe", "arguments": {"x": 1}}}
    )
    server.end_session()
    assert bad["error"]["code"] == -32602
    assert good["result"]["ok"] is True
    assert calls["n"] == 1


def test_call_outside_session_rejected(server):
    resp = server.dispatch(
        {
            "jsonrpc": "2.0",
            "id": 9,
            "method": "tools/call",
            "params": {"name": "record_finding", "arguments": {"text": "hello"}},
        }
    )
    assert resp["result"]["ok"] is False
    assert "outside" in resp["result"]["error"]


def test_session_restricts_visible_tools(server):
    server.begin_session("Evaluator", 2, allowed_tools=("record_finding",))
    listed = server.dispatch({"jsonrpc": "2.0", "id": 1, "method": "tools/list"})
    blocked = server.dispatch(
        {
            "jsonrpc": "2.0",
            "id": 2,
            "method": "tools/call",
            "params": {
                "name": "file_issue",
                "arguments": {
                    "title": "t",
                    "rationale": "r",
                    "acceptance_criteria": ["c"],
                    "expected_impact": "low",
                },
            },
        }
    )
    server.end_session()
    assert [t["name"] for t in listed["result"]["tools"]] == ["record_finding"]
    assert blocked["error"]["code"] == -32601


def test_session_counts_calls_and_captures_result(server):
    session = server.begin_session("Implementer", 1)
    server.dispatch(
        {
            "jsonrpc": "2.0",
            "id": 1,
            "method": "tools/call",
            "params": {"name": "record_finding", "arguments": {"text": "note"}},
        }
    )
    server.dispatch({"jsonrpc": "2.0", "id": 2, "method": "result/emit", "params": {"approve": True}})
    done = server.end_session()
    assert done is session
    assert done.tool_calls == 1  # result/emit is not a tool call
    assert done.emitted_result == {"approve": True}
    assert done.tool_log[0].tool == "record_finding"
    assert done.tool_log[0].ok


def test_call_result_ids_pair_bijectively(server):
    server.begin_session("Implementer", 0)
    ids = [11, 22, 33]
    responses = [
        server.dispatch(
            {
                "jsonrpc": "2.0",
                "id": i,
                "method": "tools/call",
                "params": {"name": "record_finding", "arguments": {"text": f"n{i}"}},
            }
        )
        for i in ids
    ]
    server.end_session()
    assert [r["id"] for r in responses] == ids


def test_validate_toolset_rejects_duplicates_and_bad_schema():
    def handler(ctx, args):
        return {}

    good = ToolSpec("a", "d", {"type": "object"}, handler)
    with pytest.raises(InvalidToolset):
        validate_toolset([good, ToolSpec("a", "d2", {"type": "object"}, handler)])
    with pytest.raises(InvalidToolset):
        validate_toolset([ToolSpec("b", "d", {"type": "nonsense"}, handler)])


def test_handle_call_handler_error_becomes_result():
    def handler(ctx, args):
        raise HandlerError("nope")

    spec = ToolSpec("t", "d", {"type": "object"}, handler)
    result = handle_call({"t": spec}, ToolCall("t", {}, 1), SessionContext("Judge", 0))
    assert result.ok is False
    assert result.error == "nope"
    assert result.call_id == 1


def test_socket_transport_round_trip(server, tmp_path):
    sock = str(tmp_path / "t.sock")
    server.serve(sock)
    try:
        server.begin_session("Implementer", 0)
        client = ToolClient(sock)
        init = client.request("initialize")
        assert init["result"]["serverInfo"]["name"] == "forgeloop"
        called = client.call_tool("record_finding", {"text": "via socket"})
        assert called["result"]["ok"] is True
        emitted = client.emit_result({"approve": False})
        assert emitted["result"]["ok"] is True
        client.close()
        done = server.end_session()
        assert done.tool_calls == 1
        assert done.emitted_result == {"approve": False}
    finally:
        server.shutdown()


def test_transport_unavailable():
    from forgeloop.mcp import TransportUnavailable

    server = ToolServer([])
    with pytest.raises(TransportUnavailable):
        server.serve("/nonexistent-dir/deep/t.sock")


def test_concurrent_session_rejected(server):
    from forgeloop.mcp import McpError

    server.begin_session("Implementer", 0)
    with pytest.raises(McpError):
        server.begin_session("Judge", 0)
    server.end_session()
