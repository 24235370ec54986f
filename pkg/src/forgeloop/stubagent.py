"""Deterministic scripted agent for offline runs.

Replays a JSONL step script in order. Step kinds and payloads:

    {"step": "apply_patch", "patch": "<unified diff>"}
    {"step": "call_tool", "name": "<tool>", "arguments": {...}}
    {"step": "emit", ...}          # remaining keys become the final result
    {"step": "sleep", "seconds": 1.5}

Patches are applied with ``git apply`` inside the workspace. To simulate a
hostile agent, apply_patch restores write permission on targets the
framework made read-only; the digest manifest is the layer that actually
catches such edits.

This module stays stdlib-only: it is re-executed as a subprocess for every
scripted invocation, so import cost is per-call overhead.

Invoked as: python -m forgeloop.stubagent SCRIPT WORKSPACE PROMPT ENDPOINT
"""

from __future__ import annotations

import json
import re
import socket
import stat
import subprocess
import sys
import time
from pathlib import Path


class MalformedScript(Exception):
    def __init__(self, index: int, detail: str):
        super().__init__(f"script step {index}: {detail}")
        self.index = index


class _Client:
    """Minimal line-framed JSON-RPC client for the tool endpoint."""

    def __init__(self, endpoint: str):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(endpoint)
        self._file = self._sock.makefile("rw", encoding="utf-8")
        self._next_id = 0

    def request(self, method: str, params: dict) -> dict:
        self._next_id += 1
        self._file.write(
            json.dumps({"jsonrpc": "2.0", "id": self._next_id, "method": method, "params": params})
            + "\n"
        )
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise RuntimeError("tool endpoint closed the connection")
        return json.loads(line)

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()


_DIFF_TARGET = re.compile(r"^\+\+\+ (?:b/)?(.+)$", re.MULTILINE)


def _unlock_targets(workspace: Path, patch: str) -> None:
    for raw in _DIFF_TARGET.findall(patch):
        target = raw.strip()
        if target == "/dev/null":
            continue
        path = workspace / target
        parent = path.parent
        if parent.exists() and not (parent.stat().st_mode & stat.S_IWUSR):
            parent.chmod(parent.stat().st_mode | stat.S_IWUSR)
        if path.exists() and not (path.stat().st_mode & stat.S_IWUSR):
            path.chmod(path.stat().st_mode | stat.S_IWUSR)


def _apply_patch(workspace: Path, patch: str, index: int) -> None:
    def run_apply():
        return subprocess.run(
            ["git", "apply", "--whitespace=nowarn", "-"],
            input=patch,
            text=True,
            cwd=workspace,
            capture_output=True,
        )

    proc = run_apply()
    if proc.returncode != 0:
        _unlock_targets(workspace, patch)
        proc = run_apply()
    if proc.returncode != 0:
        raise MalformedScript(index, f"git apply failed: {proc.stderr.strip()}")


def load_script(path: Path) -> list[dict]:
    steps = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            step = json.loads(line)
        except json.JSONDecodeError:
            raise MalformedScript(i, "not a JSON object") from None
        if not isinstance(step, dict) or "step" not in step:
            raise MalformedScript(i, "missing 'step' key")
        if step["step"] not in ("apply_patch", "call_tool", "emit", "sleep"):
            raise MalformedScript(i, f"unknown step kind {step['step']!r}")
        steps.append(step)
    return steps


def run_script(script_path: Path, workspace: Path, endpoint: str) -> int:
    steps = load_script(script_path)
    client = None

    def get_client() -> _Client:
        nonlocal client
        if client is None:
            client = _Client(endpoint)
        return client

    try:
        for i, step in enumerate(steps):
            kind = step["step"]
            if kind == "apply_patch":
                if "patch" not in step:
                    raise MalformedScript(i, "apply_patch needs a 'patch' payload")
                _apply_patch(workspace, step["patch"], i)
            elif kind == "call_tool":
                if "name" not in step:
                    raise MalformedScript(i, "call_tool needs a 'name'")
                get_client().request(
                    "tools/call", {"name": step["name"], "arguments": step.get("arguments", {})}
                )
            elif kind == "emit":
                payload = {k: v for k, v in step.items() if k != "step"}
                get_client().request("result/emit", payload)
            elif kind == "sleep":
                time.sleep(float(step.get("seconds", 0)))
    finally:
        if client is not None:
            client.close()
    return 0


def main(argv: list[str]) -> int:
    if len(argv) != 4:
        print("usage: stubagent SCRIPT WORKSPACE PROMPT ENDPOINT", file=sys.stderr)
        return 2
    script_path, workspace, _prompt, endpoint = argv
    try:
        return run_script(Path(script_path), Path(workspace), endpoint)
    except MalformedScript as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"stub cannot run: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
