"""Drives a full run: rounds until the budget is spent or the policy is done.

Wires together the workspace, the policy's tool server, harness providers,
and the event ledger. In stub mode every agent turn is a scripted stub
resolved from the scripts directory by naming convention:

    <role>_r<round>_a<attempt>.jsonl   (most specific)
    <role>_r<round>.jsonl
    <role>_default.jsonl
    (missing -> empty script: the agent completes without acting)
"""

from __future__ import annotations

import os
import shlex
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from forgeloop.contract import TargetContract, validate_contract
from forgeloop.errors import ForgeloopError
from forgeloop.harness import AgentRole, HarnessConfig, assemble_prompt, invoke_agent, scripted_stub
from forgeloop.innerloop import RoundStatus, RoundTask, ScanConfig, execute_round
from forgeloop.ledger import LedgerWriter
from forgeloop.mcp import ToolServer
from forgeloop.policy import (
    Exhausted,
    IssueTrackerPolicy,
    EvolutionaryPolicy,
    NoEligibleIssue,
    RalphPolicy,
)
from forgeloop.skills import SkillLibrary, default_library_path, load_library
from forgeloop.workspace import Checkpoint, Workspace, init_workspace, revert_to


class RunSetupError(ForgeloopError):
    pass


DEFAULT_TASK = (
    "Build or improve the bespoke serving system for this target. Keep the "
    "accuracy checker green and optimize the benchmark headline metric."
)

_ROLES = {role.value.lower(): role for role in AgentRole}


def stub_harness_provider(scripts_dir: Path, timeout_s: float):
    # Stub processes run with cwd inside the workspace; script paths must
    # survive that, so resolve them here.
    scripts_dir = Path(scripts_dir).resolve()

    def provider(role: AgentRole, round_index: int, attempt: int) -> HarnessConfig:
        stem = role.value.lower()
        for name in (
            f"{stem}_r{round_index}_a{attempt}.jsonl",
            f"{stem}_r{round_index}.jsonl",
            f"{stem}_default.jsonl",
        ):
            candidate = scripts_dir / name
            if candidate.exists():
                return scripted_stub(candidate, timeout_s)
        return scripted_stub(os.devnull, timeout_s)

    return provider


def agent_harness_provider(command_template: str, timeout_s: float, env_allowlist=()):
    tokens = tuple(shlex.split(command_template))

    def provider(role: AgentRole, round_index: int, attempt: int) -> HarnessConfig:
        return HarnessConfig(
            command_template=tokens, env_allowlist=tuple(env_allowlist), timeout_s=timeout_s
        )

    return provider


@dataclass
class RunOutcome:
    rounds_run: int
    checkpoints: int
    best: Optional[Checkpoint]
    stopped_reason: str


def make_policy(
    name: str,
    ws: Workspace,
    mode: str,
    task_text: str,
    revert_fn,
    orchestrator_invoker=None,
):
    if name == "issue_tracker":
        return IssueTrackerPolicy(
            ws,
            stub_mode=(mode == "stub"),
            orchestrator_invoker=orchestrator_invoker,
            revert_fn=revert_fn,
        )
    if name == "evolutionary":
        return EvolutionaryPolicy(ws, seed_task=task_text, revert_fn=revert_fn)
    if name == "ralph":
        return RalphPolicy(ws, task_text=task_text, revert_fn=revert_fn)
    raise RunSetupError(f"unknown policy: {name}")


def run_target(
    contract: TargetContract,
    workspace_root: Path,
    ledger_path: Path,
    policy_name: str = "issue_tracker",
    mode: str = "stub",
    stub_scripts: Optional[Path] = None,
    harness_cmd: Optional[str] = None,
    task_text: str = DEFAULT_TASK,
    library: Optional[SkillLibrary] = None,
    max_rounds: Optional[int] = None,
) -> RunOutcome:
    report = validate_contract(contract)
    if not report.ok:
        details = "; ".join(f"{v.subject}: {v.detail}" for v in report.violations)
        raise RunSetupError(f"contract is not usable: {details}")
    if mode == "stub":
        if stub_scripts is None:
            raise RunSetupError("stub mode needs a stub scripts directory")
        harnesses = stub_harness_provider(stub_scripts, contract.budgets.agent_timeout_s)
    elif mode == "agent":
        if not harness_cmd:
            raise RunSetupError("agent mode needs a harness command template")
        harnesses = agent_harness_provider(harness_cmd, contract.budgets.agent_timeout_s)
    else:
        raise RunSetupError(f"unknown mode: {mode}")

    ws = init_workspace(contract, workspace_root)
    if library is None:
        library = load_library(default_library_path())

    ledger = LedgerWriter(ledger_path)
    round_cell = {"round": 0}

    def revert_fn(cp: Checkpoint, reason: str) -> None:
        revert_to(ws, cp)
        ledger.append(
            "revert",
            round_cell["round"],
            {"to_commit": cp.commit, "reason": reason, "tree_digest": cp.tree_digest},
        )

    # The endpoint lives in its own short tmp dir: socket paths have a hard
    # length cap and workspace roots can be deep.
    sock_dir = tempfile.mkdtemp(prefix="fl-")
    endpoint = os.path.join(sock_dir, "tools.sock")

    orchestrator_invoker = None
    if mode == "agent" and policy_name == "issue_tracker":

        def orchestrator_invoker(policy, round_index):
            backlog = "\n".join(i.to_json() for i in sorted(policy.issues.values(), key=lambda i: i.id))
            task = (
                "Pick the next open issue to dispatch via the select_issue tool.\n\n"
                f"## BACKLOG\n{backlog}\n\n## MEMORY\n{policy.memory.serialize()}"
            )
            bundle = assemble_prompt(
                AgentRole.ORCHESTRATOR, task, (), (), feedback=None, instructions=contract.instructions
            )
            invoke_agent(
                harnesses(AgentRole.ORCHESTRATOR, round_index, 1),
                bundle,
                ws.root,
                endpoint,
                round_index,
                server=server,
                ledger=ledger,
                allowed_tools=policy.allowed_tools(AgentRole.ORCHESTRATOR),
            )

    policy = make_policy(policy_name, ws, mode, task_text, revert_fn, orchestrator_invoker)
    toolset = (
        policy.orchestrator_toolset()
        if isinstance(policy, IssueTrackerPolicy)
        else policy.toolset()
    )
    server = ToolServer(list(toolset), ledger=ledger)
    server.serve(endpoint)

    checkpoints = 0
    rounds_run = 0
    stopped = "budget exhausted"
    scan_config = ScanConfig()
    budget_rounds = max_rounds if max_rounds is not None else contract.budgets.max_rounds
    try:
        for round_index in range(budget_rounds):
            round_cell["round"] = round_index
            try:
                directive = policy.begin_round(round_index)
            except (Exhausted, NoEligibleIssue) as exc:
                stopped = f"policy exhausted: {exc}"
                break
            ledger.append(
                "round_started",
                round_index,
                {
                    "policy": policy.name,
                    "issue_id": directive.issue_id,
                    "start_commit": directive.start.commit if directive.start else ws.head,
                    "task_digest": None,
                },
            )
            if directive.revert_requested is not None:
                revert_fn(directive.revert_requested, "requested by policy at round start")

            task = RoundTask(
                directive=directive,
                round=round_index,
                retry_budget=contract.budgets.retry_budget,
            )
            result = execute_round(
                task,
                ws,
                contract,
                harnesses,
                server=server,
                endpoint=endpoint,
                ledger=ledger,
                library=library,
                scan_config=scan_config,
                allowed_tools=policy.allowed_tools,
            )
            rounds_run += 1
            if result.status is RoundStatus.VALIDATED:
                checkpoints += 1
                outputs = result.metric.extras.get("outputs", []) if result.metric else []
                if outputs:
                    scan_config = ScanConfig(
                        latency_floor_s=scan_config.latency_floor_s,
                        benchmark_outputs=tuple(str(o) for o in outputs),
                        access_tracer=scan_config.access_tracer,
                    )
            policy.end_round(directive, result, round_index)

            transition = None
            if directive.issue_id is not None and isinstance(policy, IssueTrackerPolicy):
                issue = policy.issues[directive.issue_id]
                transition = f"in_progress->{issue.status}"
            ledger.append(
                "round_finished",
                round_index,
                {
                    "status": result.status.value,
                    "issue_id": directive.issue_id,
                    "transition": transition,
                    "metric": result.metric.metric if result.metric else None,
                    "best_metric": policy.best.best.metric if policy.best.best else None,
                    "backlog": policy.backlog_counts(),
                },
            )
    finally:
        server.shutdown()
        ledger.close()
        shutil.rmtree(sock_dir, ignore_errors=True)

    return RunOutcome(
        rounds_run=rounds_run,
        checkpoints=checkpoints,
        best=policy.best.best,
        stopped_reason=stopped,
    )
