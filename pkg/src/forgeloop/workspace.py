"""Isolated, version-controlled build area for one target.

Layout under the workspace root:

    .git/            history of validated checkpoints (branch: main)
    .gitignore       keeps mounts and loop state out of commits
    artifacts/       read-only copies of reference / checker / benchmark
    candidate/       the agent-writable serving-system tree
    MEMORY.md, ISSUES.jsonl, ...   policy state, never committed

Mount enforcement is double-layered: files are chmod'd read-only, and a
digest manifest recorded at init is re-verified after every round. The
digest check is the portable gate; the chmod is best-effort since an
owner-uid agent process can always restore write permission.

Every accepted build is a commit on ``main`` tagged ``round-<N>`` so
checkpoints stay reachable after a revert resets the branch.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import stat
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional

from forgeloop.errors import ForgeloopError

if TYPE_CHECKING:  # pragma: no cover
    from forgeloop.gates.metrics import MetricReport


class WorkspaceError(ForgeloopError):
    pass


class RepoInitFailed(WorkspaceError):
    pass


class MountFailed(WorkspaceError):
    pass


class NothingToCommit(WorkspaceError):
    pass


class VerdictNotPassed(WorkspaceError):
    pass


class UnknownCommit(WorkspaceError):
    pass


ARTIFACTS_DIR = "artifacts"
CANDIDATE_DIR = "candidate"

_IGNORED = [
    "/artifacts/",
    "/MEMORY.md",
    "/ISSUES.jsonl",
    "/RALPH_HISTORY.md",
    "/ledger.jsonl",
    "/.prompts/",
    "__pycache__/",
]


@dataclass(frozen=True)
class MountEntry:
    source: Path
    mount: Path  # relative to workspace root
    digest: str


@dataclass(frozen=True)
class MountManifest:
    entries: tuple[MountEntry, ...]


@dataclass(frozen=True)
class TamperFinding:
    mount: str
    kind: str  # "modified" | "missing"


@dataclass(frozen=True)
class TamperReport:
    findings: tuple[TamperFinding, ...]

    @property
    def intact(self) -> bool:
        return not self.findings


@dataclass(frozen=True)
class Checkpoint:
    commit: str
    round: int
    metric: float
    unit: str
    higher_is_better: bool
    tree_digest: str
    parent: Optional[str] = None


def _digest_path(path: Path) -> str:
    """sha256 over file contents; directories hash sorted (relpath, filehash) pairs."""
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    if path.is_dir():
        acc = hashlib.sha256()
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            rel = sub.relative_to(path).as_posix()
            acc.update(rel.encode())
            acc.update(b"\0")
            acc.update(hashlib.sha256(sub.read_bytes()).hexdigest().encode())
            acc.update(b"\n")
        return acc.hexdigest()
    raise MountFailed(f"mount source vanished: {path}")


def _set_readonly(path: Path) -> None:
    def lock(p: Path):
        mode = p.stat().st_mode
        p.chmod(mode & ~(stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH))

    if path.is_dir():
        for sub in path.rglob("*"):
            lock(sub)
    lock(path)


def format_metric(value: float) -> str:
    """Trailer-friendly float rendering (100.0 -> '100')."""
    return f"{value:g}"


class Workspace:
    """One round at a time; operations are not concurrently callable."""

    def __init__(self, root: Path, manifest: MountManifest, head: str):
        self.root = root
        self.manifest = manifest
        self.head = head

    # -- git plumbing -------------------------------------------------

    def _git(self, *args: str, check: bool = True, env: dict | None = None) -> subprocess.CompletedProcess:
        full_env = os.environ.copy()
        if env:
            full_env.update(env)
        proc = subprocess.run(
            ["git", *args],
            cwd=self.root,
            capture_output=True,
            text=True,
            env=full_env,
        )
        if check and proc.returncode != 0:
            raise WorkspaceError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
        return proc

    def _commit_exists(self, commit: str) -> bool:
        return self._git("cat-file", "-e", f"{commit}^{{commit}}", check=False).returncode == 0

    def tree_digest(self, commit: str) -> str:
        if not self._commit_exists(commit):
            raise UnknownCommit(commit)
        return self._git("rev-parse", f"{commit}^{{tree}}").stdout.strip()

    def worktree_digest(self) -> str:
        """Tree hash of the current worktree (tracked + unignored untracked)."""
        with tempfile.TemporaryDirectory(prefix="fl-index-") as tmp:
            env = {"GIT_INDEX_FILE": os.path.join(tmp, "index")}
            self._git("add", "-A", env=env)
            return self._git("write-tree", env=env).stdout.strip()

    # -- paths --------------------------------------------------------

    @property
    def candidate_root(self) -> Path:
        return self.root / CANDIDATE_DIR

    @property
    def artifacts_root(self) -> Path:
        return self.root / ARTIFACTS_DIR

    def mount_path(self, name: str) -> Path:
        return self.artifacts_root / name


def init_workspace(contract, root: str | Path) -> Workspace:
    """Create the repo, the baseline commit, and the read-only mounts.

    ``root`` must be empty or absent. The manifest records a digest per
    mounted artifact (reference, checker, benchmark).
    """
    root = Path(root).resolve()
    if root.exists() and any(root.iterdir()):
        raise WorkspaceError(f"workspace root is not empty: {root}")
    root.mkdir(parents=True, exist_ok=True)

    proc = subprocess.run(
        ["git", "init", "-q", "-b", "main", str(root)], capture_output=True, text=True
    )
    if proc.returncode != 0:
        raise RepoInitFailed(proc.stderr.strip())

    ws = Workspace(root=root, manifest=MountManifest(entries=()), head="")
    ws._git("config", "user.email", "loop@forgeloop.local")
    ws._git("config", "user.name", "forgeloop")
    ws._git("config", "commit.gpgsign", "false")

    (root / ".gitignore").write_text("\n".join(_IGNORED) + "\n", encoding="utf-8")
    ws._git("add", ".gitignore")
    ws._git("commit", "-q", "-m", "baseline")
    ws.head = ws._git("rev-parse", "HEAD").stdout.strip()

    (root / CANDIDATE_DIR).mkdir()
    artifacts = root / ARTIFACTS_DIR
    artifacts.mkdir()

    entries = []
    for name, source in (
        ("reference", contract.reference_impl),
        ("checker", contract.checker),
        ("benchmark", contract.benchmark),
    ):
        source = Path(source)
        dest = artifacts / name
        try:
            if source.is_dir():
                shutil.copytree(source, dest)
            else:
                shutil.copy2(source, dest)
        except OSError as exc:
            raise MountFailed(f"mounting {name} from {source}: {exc}") from exc
        _set_readonly(dest)
        entries.append(MountEntry(source=source, mount=dest.relative_to(root), digest=_digest_path(dest)))

    ws.manifest = MountManifest(entries=tuple(entries))
    return ws


def verify_mounts(ws: Workspace) -> TamperReport:
    """Re-hash every mount; a nonempty report means an artifact was touched."""
    findings = []
    for entry in ws.manifest.entries:
        target = ws.root / entry.mount
        if not target.exists():
            findings.append(TamperFinding(mount=str(entry.mount), kind="missing"))
            continue
        if _digest_path(target) != entry.digest:
            findings.append(TamperFinding(mount=str(entry.mount), kind="modified"))
    return TamperReport(findings=tuple(findings))


def restore_mounts(ws: Workspace) -> None:
    """Re-copy tampered mounts from their sources (recovery after detection)."""
    for entry in ws.manifest.entries:
        target = ws.root / entry.mount
        if target.exists() and _digest_path(target) == entry.digest:
            continue
        if target.exists():
            _make_writable(target)
            if target.is_dir():
                shutil.rmtree(target)
            else:
                target.unlink()
        if entry.source.is_dir():
            shutil.copytree(entry.source, target)
        else:
            shutil.copy2(entry.source, target)
        _set_readonly(target)
        if _digest_path(target) != entry.digest:
            raise MountFailed(f"mount source drifted since init: {entry.source}")


def _make_writable(path: Path) -> None:
    def unlock(p: Path):
        p.chmod(p.stat().st_mode | stat.S_IWUSR)

    if path.is_dir():
        for sub in path.rglob("*"):
            unlock(sub)
    unlock(path)


def commit_checkpoint(ws: Workspace, round_index: int, metric: "MetricReport", verdict) -> Checkpoint:
    """Commit the round's worktree as a validated checkpoint on ``main``.

    The commit message carries machine-readable trailers (Round / Metric /
    Verdict) so any policy can reconstruct history from the repo alone.
    """
    if not getattr(verdict, "passed", False):
        raise VerdictNotPassed(f"round {round_index} verdict did not pass")
    parent = ws.head
    ws._git("add", "-A")
    if ws._git("diff", "--cached", "--quiet", "HEAD", check=False).returncode == 0:
        raise NothingToCommit(f"round {round_index} left the tree unchanged")
    message = (
        f"checkpoint: round {round_index}\n"
        f"\n"
        f"Round: {round_index}\n"
        f"Metric: {format_metric(metric.metric)} {metric.unit} "
        f"higher_is_better={'true' if metric.higher_is_better else 'false'}\n"
        f"Verdict: passed\n"
    )
    ws._git("commit", "-q", "-m", message)
    commit = ws._git("rev-parse", "HEAD").stdout.strip()
    ws._git("tag", "-f", f"round-{round_index}", commit)
    ws.head = commit
    return Checkpoint(
        commit=commit,
        round=round_index,
        metric=metric.metric,
        unit=metric.unit,
        higher_is_better=metric.higher_is_better,
        tree_digest=ws.tree_digest(commit),
        parent=parent,
    )


def revert_to(ws: Workspace, cp: Checkpoint) -> None:
    """Restore the worktree to the checkpoint's tree; mounts are untouched."""
    if not ws._commit_exists(cp.commit):
        raise UnknownCommit(cp.commit)
    ws._git("reset", "--hard", "-q", cp.commit)
    ws._git("clean", "-fdq")
    ws.head = cp.commit


def restore_tree(ws: Workspace, tree_digest: str) -> None:
    """Reset worktree content (not HEAD) to a previously snapshotted tree."""
    ws._git("read-tree", tree_digest)
    ws._git("checkout-index", "-f", "-a")
    ws._git("clean", "-fdq")


@dataclass(frozen=True)
class Change:
    path: str
    kind: str  # "added" | "modified" | "deleted"
    line_delta: int


_KIND = {"A": "added", "M": "modified", "D": "deleted"}


def diff_since(ws: Workspace, cp: "Checkpoint | str") -> tuple[Change, ...]:
    """Content-based change summary between a checkpoint (or raw commit id)
    and the worktree."""
    commit = cp.commit if isinstance(cp, Checkpoint) else cp
    if not ws._commit_exists(commit):
        raise UnknownCommit(commit)
    worktree = ws.worktree_digest()
    base_tree = ws.tree_digest(commit)
    status = ws._git("diff-tree", "-r", "--name-status", base_tree, worktree).stdout
    numstat = ws._git("diff-tree", "-r", "--numstat", base_tree, worktree).stdout

    deltas: dict[str, int] = {}
    for line in numstat.splitlines():
        added, deleted, path = line.split("\t", 2)
        if added == "-":  # binary
            deltas[path] = 0
        else:
            deltas[path] = int(added) - int(deleted)

    changes = []
    for line in status.splitlines():
        code, path = line.split("\t", 1)
        changes.append(
            Change(path=path, kind=_KIND.get(code[0], code[0]), line_delta=deltas.get(path, 0))
        )
    return tuple(sorted(changes, key=lambda c: c.path))
