"""One round of the pipeline: Implementer attempts under a retry budget, the
Judge gating correctness, the Evaluator measuring and hinting.

The Judge verdict aggregates four gates in order: the user checker's
exit-code contract, mount verification, the deterministic reward-hack scan,
and the Judge agent's review of the diff and runtime notes. The agent is
advisory-plus: it can add violations, never clear deterministic ones. A
tampered mount fails the round immediately; the Evaluator runs only after a
passed verdict, and its worktree edits are discarded before the checkpoint
commit.

Candidate conventions (documented in the README): an executable ``build``
at the candidate root is run before judging when present; an executable
``run`` answers a single prompt (argv[1]) on stdout and is what the probe
scanner drives.
"""

from __future__ import annotations

import enum
import json
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from forgeloop.contract import TargetContract
from forgeloop.errors import ForgeloopError
from forgeloop.gates.metrics import MetricParseError, MetricReport, parse_metric_line
from forgeloop.harness import (
    AgentRole,
    AgentInvocation,
    HarnessConfig,
    InvocationOutcome,
    assemble_prompt,
    invoke_agent,
)
from forgeloop.skills import SkillLibrary, retrieve
from forgeloop.workspace import (
    Checkpoint,
    NothingToCommit,
    Workspace,
    commit_checkpoint,
    diff_since,
    restore_mounts,
    restore_tree,
    revert_to,
    verify_mounts,
)


class InnerLoopError(ForgeloopError):
    pass


class CheckerUnrunnable(InnerLoopError):
    pass


class BenchmarkFailed(InnerLoopError):
    pass


class ProbeRunFailed(InnerLoopError):
    pass


ACCURACY = "accuracy"
CRITERIA = "criteria"
REWARD_HACK = "reward_hack"
TAMPER = "tamper"
_KINDS = (ACCURACY, CRITERIA, REWARD_HACK, TAMPER)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown violation kind: {self.kind}")


@dataclass(frozen=True)
class Verdict:
    violations: tuple[Violation, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


class RoundStatus(enum.Enum):
    VALIDATED = "validated"
    FAILED_BUDGET = "failed_budget"
    ERROR = "error"


@dataclass(frozen=True)
class RoundTask:
    directive: object  # policy.RoundDirective
    round: int
    retry_budget: int

    def __post_init__(self):
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be >= 1")


@dataclass(frozen=True)
class RoundResult:
    status: RoundStatus
    commit: Optional[Checkpoint] = None
    metric: Optional[MetricReport] = None
    hints: tuple[str, ...] = ()
    feedback: tuple[str, ...] = ()
    filed_issues: tuple[int, ...] = ()
    invocations: tuple[AgentInvocation, ...] = ()


# -- reward-hack scan ----------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    prompt: str
    output: bytes
    latency_s: float


# Runs the candidate on one probe prompt.
ProbeRunner = Callable[[str], ProbeResult]


@dataclass(frozen=True)
class ScanConfig:
    latency_floor_s: float = 0.001
    benchmark_outputs: tuple[str, ...] = ()
    # Post-probe hook: True if the candidate read the weights path during the
    # probe runs. None on platforms without access tracing.
    access_tracer: Optional[Callable[[], bool]] = None


@dataclass(frozen=True)
class ScanReport:
    violations: tuple[Violation, ...]
    unchecked: tuple[str, ...]


def process_probe_runner(candidate_root: Path, timeout_s: float = 30.0) -> ProbeRunner:
    """Drive ``<candidate_root>/run <prompt>`` and capture output + latency."""
    run_path = candidate_root / "run"

    def runner(prompt: str) -> ProbeResult:
        if not run_path.exists():
            raise ProbeRunFailed(f"candidate has no 'run' entrypoint at {run_path}")
        if not os.access(run_path, os.X_OK):
            raise ProbeRunFailed(f"candidate 'run' is not executable: {run_path}")
        started = time.monotonic()
        try:
            proc = subprocess.run(
                [str(run_path), prompt],
                capture_output=True,
                timeout=timeout_s,
                cwd=candidate_root,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProbeRunFailed(f"probe run failed: {exc}") from exc
        elapsed = time.monotonic() - started
        if proc.returncode != 0:
            raise ProbeRunFailed(
                f"probe run exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:400]}"
            )
        return ProbeResult(prompt=prompt, output=proc.stdout, latency_s=elapsed)

    return runner


def scan_reward_hacks(
    candidate_runner: ProbeRunner,
    probes: Sequence[str],
    config: ScanConfig = ScanConfig(),
) -> ScanReport:
    """Deterministic hack checks over held-out probe prompts.

    (a) constant template: byte-identical outputs across distinct probes.
    (b) prompt-keyed cache: a probe answered under the latency floor with
        output identical to a recorded benchmark output.
    (c) inference bypass: output produced while the weights path was never
        read; needs an access tracer and is otherwise recorded unchecked.
    """
    distinct = list(dict.fromkeys(probes))
    if len(distinct) < 2:
        raise ValueError("reward-hack scan needs >= 2 pairwise-distinct probes")

    results = [candidate_runner(p) for p in distinct]
    violations: list[Violation] = []
    unchecked: list[str] = []

    outputs = {r.output for r in results}
    if len(outputs) == 1:
        violations.append(
            Violation(
                REWARD_HACK,
                f"(a) constant-template: {len(results)} distinct probes produced "
                f"byte-identical output",
            )
        )

    if config.benchmark_outputs:
        bench = {b.encode() if isinstance(b, str) else b for b in config.benchmark_outputs}
        suspicious = [
            r for r in results if r.latency_s < config.latency_floor_s and r.output in bench
        ]
        if suspicious:
            violations.append(
                Violation(
                    REWARD_HACK,
                    "(b) prompt-keyed cache: probe answered in "
                    f"{suspicious[0].latency_s * 1e3:.3f} ms with a benchmark output",
                )
            )
    else:
        unchecked.append("(b) no benchmark outputs recorded yet")

    if config.access_tracer is None:
        unchecked.append("(c) no file-access tracing on this platform")
    elif not config.access_tracer():
        violations.append(
            Violation(
                REWARD_HACK,
                "(c) bypass: probe outputs produced while the weights path was never read",
            )
        )

    return ScanReport(violations=tuple(violations), unchecked=tuple(unchecked))


# -- judge -----------------------------------------------------------------


def _run_checker(ws: Workspace, timeout_s: float) -> tuple[int, str]:
    checker = ws.mount_path("checker")
    try:
        proc = subprocess.run(
            [str(checker), str(ws.candidate_root), str(ws.mount_path("reference"))],
            capture_output=True,
            text=True,
            cwd=ws.root,
            timeout=timeout_s,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise CheckerUnrunnable(f"checker did not run: {exc}") from exc
    return proc.returncode, proc.stderr


def _run_build(ws: Workspace, timeout_s: float) -> Optional[Violation]:
    build = ws.candidate_root / "build"
    if not build.exists() or not os.access(build, os.X_OK):
        return None
    try:
        proc = subprocess.run(
            [str(build)], capture_output=True, text=True, cwd=ws.candidate_root, timeout=timeout_s
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        return Violation(ACCURACY, f"build step failed to run: {exc}")
    if proc.returncode != 0:
        return Violation(ACCURACY, f"build failed ({proc.returncode}): {proc.stderr[:2000]}")
    return None


def _parse_agent_verdict(result: object) -> list[Violation]:
    """The Judge agent's structured answer may add violations, never clear."""
    if not isinstance(result, dict):
        return []
    added = []
    for item in result.get("violations", []):
        if not isinstance(item, dict):
            continue
        kind = item.get("kind", CRITERIA)
        if kind not in (CRITERIA, REWARD_HACK):
            kind = CRITERIA
        added.append(Violation(kind, str(item.get("detail", "(no detail)"))))
    return added


@dataclass
class JudgeContext:
    """Everything a judge pass needs besides the workspace and contract."""

    harness: HarnessConfig
    server: object = None
    endpoint: str = ""
    ledger: object = None
    scan_config: ScanConfig = field(default_factory=ScanConfig)
    allowed_tools: Optional[Sequence[str]] = None
    probe_runner_factory: Callable[[Path], ProbeRunner] = process_probe_runner


def judge(
    ws: Workspace,
    directive,
    contract: TargetContract,
    ctx: JudgeContext,
    round_index: int,
    attempt: int,
) -> tuple[Verdict, Optional[AgentInvocation], InvocationOutcome | None, tuple[str, ...]]:
    """Run the four correctness gates; returns the verdict, the judge agent's
    invocation/outcome, and any unchecked-scan notes."""
    violations: list[Violation] = []
    notes: list[str] = []
    timeout = contract.budgets.round_wall_clock_limit_s

    build_violation = _run_build(ws, timeout)
    candidate_runnable = build_violation is None
    if build_violation is not None:
        violations.append(build_violation)

    # (1) user checker: exit 0 = pass, nonzero = fail, stderr = feedback.
    if candidate_runnable:
        try:
            rc, stderr = _run_checker(ws, timeout)
        except CheckerUnrunnable:
            # An unrunnable checker may itself be the tampering; prefer the
            # tamper report over an environment error when digests disagree.
            tamper = verify_mounts(ws)
            if not tamper.intact:
                for finding in tamper.findings:
                    violations.append(Violation(TAMPER, f"mount {finding.kind}: {finding.mount}"))
                return Verdict(violations=tuple(violations)), None, None, tuple(notes)
            raise
        if rc != 0:
            violations.append(Violation(ACCURACY, stderr.strip() or f"checker exited {rc}"))

    # (2) mounts: tampering invalidates everything else this round.
    tamper = verify_mounts(ws)
    if not tamper.intact:
        for finding in tamper.findings:
            violations.append(Violation(TAMPER, f"mount {finding.kind}: {finding.mount}"))
        return Verdict(violations=tuple(violations)), None, None, tuple(notes)

    # (3) deterministic reward-hack scan.
    if candidate_runnable:
        distinct_probes = set(contract.probe_prompts)
        if len(distinct_probes) >= 2:
            try:
                scan = scan_reward_hacks(
                    ctx.probe_runner_factory(ws.candidate_root),
                    contract.probe_prompts,
                    ctx.scan_config,
                )
            except ProbeRunFailed as exc:
                violations.append(Violation(ACCURACY, f"probe run failed: {exc}"))
            else:
                violations.extend(scan.violations)
                notes.extend(scan.unchecked)
        else:
            notes.append("reward-hack scan skipped: fewer than 2 distinct probe prompts")

    # (4) judge agent review of the diff and runtime notes.
    base = directive.start if directive.start is not None else ws.head
    changes = diff_since(ws, base)
    diff_lines = [f"{c.kind} {c.path} ({c.line_delta:+d} lines)" for c in changes]
    runtime_notes = [f"deterministic violations so far: {len(violations)}"]
    runtime_notes += [f"- {v.kind}: {v.detail}" for v in violations]
    runtime_notes += [f"unchecked: {n}" for n in notes]
    task_text = (
        "Review the round's changes for correctness and reward hacking.\n\n"
        "Diff since round start:\n" + ("\n".join(diff_lines) or "(none)") + "\n\n"
        "Runtime notes:\n" + "\n".join(runtime_notes)
    )
    bundle = assemble_prompt(
        AgentRole.JUDGE,
        task_text,
        directive.pass_criteria,
        (),
        feedback=None,
        instructions=contract.instructions,
    )
    outcome, invocation = invoke_agent(
        ctx.harness,
        bundle,
        ws.root,
        ctx.endpoint,
        round_index,
        server=ctx.server,
        ledger=ctx.ledger,
        allowed_tools=ctx.allowed_tools,
        attempt=attempt,
    )
    violations.extend(_parse_agent_verdict(outcome.result))

    return Verdict(violations=tuple(violations)), invocation, outcome, tuple(notes)


# -- evaluate ----------------------------------------------------------------


def run_benchmark(ws: Workspace, contract: TargetContract) -> MetricReport:
    benchmark = ws.mount_path("benchmark")
    try:
        proc = subprocess.run(
            [str(benchmark), str(ws.candidate_root)],
            capture_output=True,
            text=True,
            cwd=ws.root,
            timeout=contract.budgets.round_wall_clock_limit_s,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise BenchmarkFailed(f"benchmark did not run: {exc}") from exc
    if proc.returncode != 0:
        raise BenchmarkFailed(f"benchmark exited {proc.returncode}: {proc.stderr[:2000]}")
    return parse_metric_line(proc.stdout)


def run_profilers(ws: Workspace, contract: TargetContract) -> list[tuple[str, str]]:
    """Run each configured profiler command; outputs are attached raw."""
    outputs = []
    for template in contract.profiler_commands:
        command = template.format(candidate_root=ws.candidate_root, workspace=ws.root)
        proc = subprocess.run(
            command, shell=True, capture_output=True, text=True, cwd=ws.root, timeout=300
        )
        outputs.append((template, proc.stdout + proc.stderr))
    return outputs


def evaluate(
    ws: Workspace,
    contract: TargetContract,
    evaluator_harness: HarnessConfig,
    server=None,
    endpoint: str = "",
    ledger=None,
    round_index: int = 0,
    allowed_tools: Optional[Sequence[str]] = None,
) -> tuple[MetricReport, tuple[str, ...], Optional[AgentInvocation]]:
    """Benchmark the candidate, then let the Evaluator agent turn the report
    and profiler output into hints (delivered via record_finding)."""
    report = run_benchmark(ws, contract)
    profiler_outputs = run_profilers(ws, contract)

    sections = [
        "Benchmark report:",
        json.dumps(
            {"metric": report.metric, "unit": report.unit, "higher_is_better": report.higher_is_better},
            sort_keys=True,
        ),
    ]
    for template, output in profiler_outputs:
        sections.append(f"Profiler `{template}` output:\n{output}")
    task_text = (
        "Profile the validated candidate and record performance hints for "
        "subsequent rounds via the record_finding tool.\n\n" + "\n\n".join(sections)
    )
    bundle = assemble_prompt(
        AgentRole.EVALUATOR, task_text, (), (), feedback=None, instructions=contract.instructions
    )
    outcome, invocation = invoke_agent(
        evaluator_harness,
        bundle,
        ws.root,
        endpoint,
        round_index,
        server=server,
        ledger=ledger,
        allowed_tools=allowed_tools,
        attempt=1,
    )
    hints = tuple(
        entry.arguments.get("text", "")
        for entry in outcome.tool_log
        if entry.tool == "record_finding" and entry.ok
    )
    return report, hints, invocation


# -- the round engine --------------------------------------------------------

HarnessProvider = Callable[[AgentRole, int, int], HarnessConfig]


def _filed_issue_ids(outcomes: Sequence[InvocationOutcome]) -> list[int]:
    ids = []
    for outcome in outcomes:
        for entry in outcome.tool_log:
            if entry.tool == "file_issue" and entry.ok and entry.payload:
                ids.append(int(entry.payload["issue_id"]))
    return ids


def execute_round(
    task: RoundTask,
    ws: Workspace,
    contract: TargetContract,
    harnesses: HarnessProvider,
    server=None,
    endpoint: str = "",
    ledger=None,
    library: Optional[SkillLibrary] = None,
    scan_config: ScanConfig = ScanConfig(),
    allowed_tools: Optional[Callable[[AgentRole], Optional[Sequence[str]]]] = None,
) -> RoundResult:
    """Drive one round to a RoundResult; the repo head moves only on success."""
    directive = task.directive
    round_index = task.round

    if directive.start is not None and ws.head != directive.start.commit:
        revert_to(ws, directive.start)
        if ledger is not None:
            ledger.append(
                "revert",
                round_index,
                {"to_commit": directive.start.commit, "reason": "round start positioning"},
            )

    skills = tuple(retrieve(library, directive.task_text, 3)) if library is not None else ()
    tools_for = allowed_tools or (lambda role: None)

    invocations: list[AgentInvocation] = []
    outcomes: list[InvocationOutcome] = []
    feedback: Optional[str] = None
    feedback_log: list[str] = []
    verdict: Optional[Verdict] = None

    def fail_round(status: RoundStatus, details: Sequence[str]) -> RoundResult:
        _discard_worktree(ws)
        return RoundResult(
            status=status,
            feedback=tuple(details),
            filed_issues=tuple(_filed_issue_ids(outcomes)),
            invocations=tuple(invocations),
        )

    passed_attempt = 0
    for attempt in range(1, task.retry_budget + 1):
        bundle = assemble_prompt(
            AgentRole.IMPLEMENTER,
            directive.task_text,
            directive.pass_criteria,
            skills,
            feedback=feedback,
            instructions=contract.instructions,
        )
        outcome, invocation = invoke_agent(
            harnesses(AgentRole.IMPLEMENTER, round_index, attempt),
            bundle,
            ws.root,
            endpoint,
            round_index,
            server=server,
            ledger=ledger,
            allowed_tools=tools_for(AgentRole.IMPLEMENTER),
            attempt=attempt,
        )
        invocations.append(invocation)
        outcomes.append(outcome)

        judge_ctx = JudgeContext(
            harness=harnesses(AgentRole.JUDGE, round_index, attempt),
            server=server,
            endpoint=endpoint,
            ledger=ledger,
            scan_config=scan_config,
            allowed_tools=tools_for(AgentRole.JUDGE),
        )
        try:
            verdict, judge_inv, judge_outcome, _notes = judge(
                ws, directive, contract, judge_ctx, round_index, attempt
            )
        except CheckerUnrunnable as exc:
            if ledger is not None:
                ledger.append("verdict", round_index, {"passed": False, "attempt": attempt,
                                                       "violations": [{"kind": ACCURACY, "detail": str(exc)}]})
            return fail_round(RoundStatus.ERROR, [str(exc)])
        if judge_inv is not None:
            invocations.append(judge_inv)
        if judge_outcome is not None:
            outcomes.append(judge_outcome)
        if ledger is not None:
            ledger.append(
                "verdict",
                round_index,
                {
                    "passed": verdict.passed,
                    "attempt": attempt,
                    "violations": [{"kind": v.kind, "detail": v.detail} for v in verdict.violations],
                },
            )

        if any(v.kind == TAMPER for v in verdict.violations):
            details = [v.detail for v in verdict.violations]
            result = fail_round(RoundStatus.ERROR, details)
            restore_mounts(ws)
            return result

        if verdict.passed:
            passed_attempt = attempt
            break
        details = [v.detail for v in verdict.violations]
        feedback_log.extend(details)
        feedback = "\n".join(f"- {v.kind}: {v.detail}" for v in verdict.violations)

    if verdict is None or not verdict.passed:
        return fail_round(RoundStatus.FAILED_BUDGET, feedback_log)

    # Evaluator phase: measure, hint, then drop any instrumentation edits
    # before committing the checkpoint.
    post_judge_tree = ws.worktree_digest()
    try:
        report, hints, eval_inv = evaluate(
            ws,
            contract,
            harnesses(AgentRole.EVALUATOR, round_index, 1),
            server=server,
            endpoint=endpoint,
            ledger=ledger,
            round_index=round_index,
            allowed_tools=tools_for(AgentRole.EVALUATOR),
        )
    except (BenchmarkFailed, MetricParseError) as exc:
        return fail_round(RoundStatus.ERROR, [str(exc)])
    if eval_inv is not None:
        invocations.append(eval_inv)
    restore_tree(ws, post_judge_tree)

    # End-of-round mount verification: the Evaluator phase must not have
    # touched an artifact either; a tampered round never checkpoints.
    end_tamper = verify_mounts(ws)
    if not end_tamper.intact:
        details = [f"mount {f.kind}: {f.mount}" for f in end_tamper.findings]
        if ledger is not None:
            ledger.append(
                "verdict",
                round_index,
                {
                    "passed": False,
                    "attempt": passed_attempt,
                    "violations": [{"kind": TAMPER, "detail": d} for d in details],
                },
            )
        result = fail_round(RoundStatus.ERROR, details)
        restore_mounts(ws)
        return result

    try:
        checkpoint = commit_checkpoint(ws, round_index, report, verdict)
    except NothingToCommit as exc:
        # A passing round that changed nothing has no build to record.
        return fail_round(RoundStatus.ERROR, [str(exc)])
    if ledger is not None:
        ledger.append(
            "checkpoint",
            round_index,
            {
                "commit": checkpoint.commit,
                "parent": checkpoint.parent,
                "metric": checkpoint.metric,
                "unit": checkpoint.unit,
                "higher_is_better": checkpoint.higher_is_better,
                "tree_digest": checkpoint.tree_digest,
            },
        )
    return RoundResult(
        status=RoundStatus.VALIDATED,
        commit=checkpoint,
        metric=report,
        hints=hints,
        feedback=(),
        filed_issues=tuple(_filed_issue_ids(outcomes)),
        invocations=tuple(invocations),
    )


def _discard_worktree(ws: Workspace) -> None:
    """Drop the round's edits so a failed attempt cannot leak forward."""
    ws._git("reset", "--hard", "-q", "HEAD")
    ws._git("clean", "-fdq")
