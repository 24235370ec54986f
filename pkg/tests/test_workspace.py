"""Workspace: mounts, checkpoints, reverts, tamper detection, diffs."""

import random
import stat
import subprocess

import pytest

from forgeloop.gates.metrics import MetricReport
from forgeloop.workspace import (
    NothingToCommit,
    UnknownCommit,
    VerdictNotPassed,
    WorkspaceError,
    commit_checkpoint,
    diff_since,
    init_workspace,
    restore_mounts,
    revert_to,
    verify_mounts,
)


class FakeVerdict:
    def __init__(self, passed=True):
        self.passed = passed


def metric(value=100.0, unit="tok_per_s", higher=True):
    return MetricReport(metric=value, unit=unit, higher_is_better=higher)


def write_candidate(ws, name="run", text="#!/bin/sh\necho hi\n"):
    path = ws.candidate_root / name
    path.write_text(text)
    path.chmod(0o755)
    return path


def test_init_creates_manifest_with_three_digests(toy_workspace):
    ws = toy_workspace
    names = sorted(str(e.mount) for e in ws.manifest.entries)
    assert names == ["artifacts/benchmark", "artifacts/checker", "artifacts/reference"]
    assert all(e.digest for e in ws.manifest.entries)
    assert ws.head  # baseline commit exists
    assert (ws.root / ".git").is_dir()


def test_init_rejects_populated_root(toy_contract, tmp_path):
    root = tmp_path / "busy"
    root.mkdir()
    (root / "junk").write_text("x")
    with pytest.raises(WorkspaceError):
        init_workspace(toy_contract, root)


def test_reinit_same_contract_same_digests(toy_contract, tmp_path):
    a = init_workspace(toy_contract, tmp_path / "a")
    b = init_workspace(toy_contract, tmp_path / "b")
    assert [e.digest for e in a.manifest.entries] == [e.digest for e in b.manifest.entries]


def test_mounts_are_read_only(toy_workspace):
    mode = toy_workspace.mount_path("checker").stat().st_mode
    assert not mode & stat.S_IWUSR


def test_commit_checkpoint_trailers_and_head(toy_workspace):
    ws = toy_workspace
    write_candidate(ws)
    cp = commit_checkpoint(ws, 3, metric(100.0), FakeVerdict())
    assert ws.head == cp.commit
    assert cp.parent != cp.commit
    message = subprocess.run(
        ["git", "log", "-1", "--format=%B"], cwd=ws.root, capture_output=True, text=True
    ).stdout
    assert "Round: 3" in message
    assert "Metric: 100 tok_per_s higher_is_better=true" in message
    assert "Verdict: passed" in message


def test_commit_checkpoint_unchanged_tree(toy_workspace):
    with pytest.raises(NothingToCommit):
        commit_checkpoint(toy_workspace, 0, metric(), FakeVerdict())


def test_commit_checkpoint_requires_passed_verdict(toy_workspace):
    write_candidate(toy_workspace)
    with pytest.raises(VerdictNotPassed):
        commit_checkpoint(toy_workspace, 0, metric(), FakeVerdict(passed=False))


def test_revert_round_trip_tree_digest(toy_workspace):
    ws = toy_workspace
    write_candidate(ws, text="#!/bin/sh\necho v1\n")
    cp_a = commit_checkpoint(ws, 0, metric(1.0), FakeVerdict())
    write_candidate(ws, text="#!/bin/sh\necho v2\n")
    cp_b = commit_checkpoint(ws, 1, metric(2.0), FakeVerdict())
    assert cp_b.parent == cp_a.commit

    revert_to(ws, cp_a)
    assert ws.head == cp_a.commit
    assert ws.worktree_digest() == cp_a.tree_digest
    assert (ws.candidate_root / "run").read_text() == "#!/bin/sh\necho v1\n"

    # Reverting to the current head is a no-op.
    revert_to(ws, cp_a)
    assert ws.worktree_digest() == cp_a.tree_digest


def test_revert_unknown_commit(toy_workspace):
    from forgeloop.workspace import Checkpoint

    ghost = Checkpoint(
        commit="0" * 40, round=0, metric=1.0, unit="x", higher_is_better=True, tree_digest=""
    )
    with pytest.raises(UnknownCommit):
        revert_to(toy_workspace, ghost)


def test_revert_leaves_mounts_untouched(toy_workspace):
    ws = toy_workspace
    write_candidate(ws)
    cp = commit_checkpoint(ws, 0, metric(), FakeVerdict())
    before = [e.digest for e in ws.manifest.entries]
    revert_to(ws, cp)
    assert verify_mounts(ws).intact
    assert [e.digest for e in ws.manifest.entries] == before


def test_revert_round_trip_fuzzed(toy_workspace):
    ws = toy_workspace
    rng = random.Random(7)
    checkpoints = []
    for round_index in range(6):
        for _ in range(rng.randint(1, 3)):
            name = f"f{rng.randint(0, 3)}.txt"
            (ws.candidate_root / name).write_text(f"content {rng.random()}\n")
        if rng.random() < 0.3 and (ws.candidate_root / "f0.txt").exists():
            (ws.candidate_root / "f0.txt").unlink()
        cp = commit_checkpoint(ws, round_index, metric(float(round_index + 1)), FakeVerdict())
        checkpoints.append(cp)
    for cp in rng.sample(checkpoints, len(checkpoints)):
        revert_to(ws, cp)
        assert ws.worktree_digest() == cp.tree_digest


def test_verify_mounts_detects_edit_and_restore_recovers(toy_workspace):
    ws = toy_workspace
    assert verify_mounts(ws).intact

    checker = ws.mount_path("checker")
    checker.chmod(0o644)
    with checker.open("a") as fh:
        fh.write("# tampered\n")
    report = verify_mounts(ws)
    assert not report.intact
    assert report.findings[0].mount == "artifacts/checker"
    assert report.findings[0].kind == "modified"

    restore_mounts(ws)
    assert verify_mounts(ws).intact


def test_verify_mounts_detects_missing(toy_workspace):
    ws = toy_workspace
    benchmark = ws.mount_path("benchmark")
    benchmark.chmod(0o755)
    benchmark.unlink()
    report = verify_mounts(ws)
    assert any(f.kind == "missing" and "benchmark" in f.mount for f in report.findings)
    restore_mounts(ws)
    assert verify_mounts(ws).intact


def test_diff_since_added_file(toy_workspace):
    ws = toy_workspace
    write_candidate(ws, text="#!/bin/sh\necho base\n")
    cp = commit_checkpoint(ws, 0, metric(), FakeVerdict())
    lines = "".join(f"line {i}\n" for i in range(10))
    (ws.candidate_root / "extra.txt").write_text(lines)
    changes = diff_since(ws, cp)
    assert len(changes) == 1
    assert changes[0].path == "candidate/extra.txt"
    assert changes[0].kind == "added"
    assert changes[0].line_delta == 10


def test_diff_since_no_changes(toy_workspace):
    ws = toy_workspace
    write_candidate(ws)
    cp = commit_checkpoint(ws, 0, metric(), FakeVerdict())
    assert diff_since(ws, cp) == ()


def test_diff_since_reverted_edit_is_empty(toy_workspace):
    ws = toy_workspace
    path = write_candidate(ws, text="#!/bin/sh\necho original\n")
    cp = commit_checkpoint(ws, 0, metric(), FakeVerdict())
    path.write_text("#!/bin/sh\necho changed\n")
    path.write_text("#!/bin/sh\necho original\n")
    assert diff_since(ws, cp) == ()


def test_diff_since_modification_and_delete(toy_workspace):
    ws = toy_workspace
    path = write_candidate(ws, text="a\nb\nc\n")
    (ws.candidate_root / "gone.txt").write_text("x\n")
    cp = commit_checkpoint(ws, 0, metric(), FakeVerdict())
    path.write_text("a\nc\n")
    (ws.candidate_root / "gone.txt").unlink()
    changes = {c.path: c for c in diff_since(ws, cp)}
    assert changes["candidate/run"].kind == "modified"
    assert changes["candidate/run"].line_delta == -1
    assert changes["candidate/gone.txt"].kind == "deleted"


def test_checkpoints_reachable_from_baseline_after_revert(toy_workspace):
    ws = toy_workspace
    write_candidate(ws, text="v1\n")
    cp1 = commit_checkpoint(ws, 0, metric(1.0), FakeVerdict())
    write_candidate(ws, text="v2\n")
    cp2 = commit_checkpoint(ws, 1, metric(2.0), FakeVerdict())
    revert_to(ws, cp1)
    write_candidate(ws, text="v3\n")
    cp3 = commit_checkpoint(ws, 2, metric(3.0), FakeVerdict())
    # Every checkpoint stays reachable via its round tag; parents chain back.
    for cp in (cp1, cp2, cp3):
        out = subprocess.run(
            ["git", "rev-parse", f"round-{cp.round}"], cwd=ws.root, capture_output=True, text=True
        )
        assert out.stdout.strip() == cp.commit
    assert cp3.parent == cp1.commit
