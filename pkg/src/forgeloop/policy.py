"""Outer-loop planning over validated checkpoints.

Three interchangeable policies share one per-round contract (begin_round /
end_round) plus two coordination mechanisms: checkpoints are git commits
(cheap reverts when a validated round regresses), and inner-loop agents
talk back through the policy's tool schema.

* issue-tracker: a backlog of structured issues plus a long-term memory
  markdown file. Agents file issues over the tool contract; each round
  dispatches one eligible issue (deterministic rule in stub mode, an
  Orchestrator harness answering via select_issue in agent mode).
* evolutionary: a capacity-bounded population of scored checkpoints;
  parents picked by seeded best-of-3 tournament, worst member evicted.
* Ralph: one fixed task re-dispatched every round with the full prior-round
  history appended.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from forgeloop.errors import ForgeloopError
from forgeloop.gates.rng import DeterministicRng
from forgeloop.harness import AgentRole
from forgeloop.innerloop import RoundResult, RoundStatus
from forgeloop.mcp import HandlerError, SessionContext, ToolSpec
from forgeloop.workspace import Checkpoint, Workspace, revert_to


class PolicyError(ForgeloopError):
    pass


class Exhausted(PolicyError):
    """Nothing left to dispatch: empty backlog/population and no seed task."""


class NoEligibleIssue(PolicyError):
    """Open issues exist but every one is blocked by an unfinished dependency."""


class RoundMismatch(PolicyError):
    pass


# -- issues ------------------------------------------------------------------

IMPACTS = ("high", "medium", "low")
STATUSES = ("open", "in_progress", "done", "rejected")

ALLOWED_TRANSITIONS = {
    ("open", "in_progress"),
    ("in_progress", "done"),
    ("in_progress", "rejected"),
    ("in_progress", "open"),  # failed round returns the issue to the backlog
}


@dataclass
class Issue:
    id: int
    title: str
    rationale: str
    acceptance_criteria: tuple[str, ...]
    expected_impact: str
    status: str = "open"
    filed_by: str = AgentRole.ORCHESTRATOR.value
    round_filed: int = 0
    depends_on: tuple[int, ...] = ()
    attempts: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "title": self.title,
                "rationale": self.rationale,
                "acceptance_criteria": list(self.acceptance_criteria),
                "expected_impact": self.expected_impact,
                "status": self.status,
                "filed_by": self.filed_by,
                "round_filed": self.round_filed,
                "depends_on": list(self.depends_on),
                "attempts": self.attempts,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "Issue":
        doc = json.loads(line)
        return Issue(
            id=int(doc["id"]),
            title=doc["title"],
            rationale=doc["rationale"],
            acceptance_criteria=tuple(doc["acceptance_criteria"]),
            expected_impact=doc["expected_impact"],
            status=doc["status"],
            filed_by=doc.get("filed_by", AgentRole.ORCHESTRATOR.value),
            round_filed=int(doc.get("round_filed", 0)),
            depends_on=tuple(doc.get("depends_on", ())),
            attempts=int(doc.get("attempts", 0)),
        )


def transition_issue(issue: Issue, new_status: str) -> None:
    if new_status not in STATUSES:
        raise HandlerError(f"unknown issue status: {new_status}")
    if (issue.status, new_status) not in ALLOWED_TRANSITIONS:
        raise HandlerError(f"forbidden transition {issue.status} -> {new_status} on issue {issue.id}")
    issue.status = new_status


# -- long-term memory ----------------------------------------------------------

MEMORY_HEADINGS = ("Directions Tried", "Evidence Against", "Promising Next", "Platform Notes")


@dataclass
class MemoryDoc:
    """Four fixed level-2 sections; serialize/parse round-trip exactly."""

    sections: dict[str, str] = field(
        default_factory=lambda: {h: "" for h in MEMORY_HEADINGS}
    )

    def serialize(self) -> str:
        blocks = []
        for heading in MEMORY_HEADINGS:
            body = self.sections.get(heading, "").rstrip()
            blocks.append(f"## {heading}\n{body}".rstrip())
        return "\n\n".join(blocks) + "\n"

    @staticmethod
    def parse(text: str) -> "MemoryDoc":
        sections = {h: "" for h in MEMORY_HEADINGS}
        current = None
        lines: dict[str, list[str]] = {h: [] for h in MEMORY_HEADINGS}
        for line in text.splitlines():
            if line.startswith("## "):
                heading = line[3:].strip()
                current = heading if heading in MEMORY_HEADINGS else None
                continue
            if current is not None:
                lines[current].append(line)
        for heading in MEMORY_HEADINGS:
            sections[heading] = "\n".join(lines[heading]).strip("\n")
        return MemoryDoc(sections=sections)

    def append_line(self, heading: str, line: str) -> None:
        if heading not in MEMORY_HEADINGS:
            raise ValueError(f"unknown memory heading: {heading}")
        body = self.sections.get(heading, "")
        self.sections[heading] = (body + "\n" + line).strip("\n")


# -- best tracker ----------------------------------------------------------------


@dataclass
class BestTracker:
    """Keeps the best validated checkpoint; replacement needs a relative
    improvement beyond the noise floor, in the metric's declared direction."""

    epsilon_rel: float = 0.005
    best: Optional[Checkpoint] = None

    def consider(self, cp: Checkpoint) -> bool:
        if self.best is None:
            self.best = cp
            return True
        old, new = self.best.metric, cp.metric
        if old == 0:
            improved = new > 0 if cp.higher_is_better else new < 0
        else:
            rel = (new - old) / abs(old) if cp.higher_is_better else (old - new) / abs(old)
            improved = rel > self.epsilon_rel
        if improved:
            self.best = cp
        return improved


# -- the per-round contract -------------------------------------------------------


@dataclass(frozen=True)
class RoundDirective:
    start: Optional[Checkpoint]  # None = continue from the current head
    task_text: str
    pass_criteria: tuple[str, ...]
    toolset: tuple[ToolSpec, ...]
    revert_requested: Optional[Checkpoint] = None
    issue_id: Optional[int] = None

    def __post_init__(self):
        if not self.task_text.strip():
            raise PolicyError("directive task_text must be nonempty")


BOOTSTRAP_TITLE = "bootstrap: produce a minimal correct serving system"
BOOTSTRAP_CRITERIA = ("the candidate passes the accuracy checker",)
DEFAULT_CRITERIA = ("the candidate passes the accuracy checker",)

# A revert hook receives (checkpoint, reason); the runner wires it to
# workspace.revert_to plus a ledger event.
RevertFn = Callable[[Checkpoint, str], None]


def _default_revert(ws: Workspace) -> RevertFn:
    def do_revert(cp: Checkpoint, _reason: str) -> None:
        revert_to(ws, cp)

    return do_revert


class IssueTrackerPolicy:
    """Backlog of structured issues + MemoryDoc, persisted at the workspace root."""

    name = "issue_tracker"

    def __init__(
        self,
        workspace: Workspace,
        epsilon_rel: float = 0.005,
        stub_mode: bool = True,
        orchestrator_invoker: Optional[Callable[["IssueTrackerPolicy", int], None]] = None,
        revert_fn: Optional[RevertFn] = None,
        seed_task: bool = True,
    ):
        self.workspace = workspace
        self.stub_mode = stub_mode
        self.orchestrator_invoker = orchestrator_invoker
        self.revert_fn = revert_fn or _default_revert(workspace)
        self.seed_task = seed_task
        self.best = BestTracker(epsilon_rel=epsilon_rel)
        self.issues: dict[int, Issue] = {}
        self._next_id = 1
        self._current: Optional[Issue] = None
        self._selected_by_tool: Optional[int] = None
        self.memory = MemoryDoc()
        self._issues_path = workspace.root / "ISSUES.jsonl"
        self._memory_path = workspace.root / "MEMORY.md"
        self._load_state()

    # -- persistence (crash recovery) -----------------------------------

    def _load_state(self) -> None:
        if self._issues_path.exists():
            for line in self._issues_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    issue = Issue.from_json(line)
                    self.issues[issue.id] = issue
                    self._next_id = max(self._next_id, issue.id + 1)
        if self._memory_path.exists():
            self.memory = MemoryDoc.parse(self._memory_path.read_text(encoding="utf-8"))

    def _persist(self) -> None:
        self._issues_path.write_text(
            "".join(issue.to_json() + "\n" for issue in sorted(self.issues.values(), key=lambda i: i.id)),
            encoding="utf-8",
        )
        self._memory_path.write_text(self.memory.serialize(), encoding="utf-8")

    # -- tool surface -----------------------------------------------------

    def file_issue(self, ctx: SessionContext, args: dict) -> dict:
        if ctx.round < 0:
            raise HandlerError("file_issue outside any active round")
        issue = Issue(
            id=self._next_id,
            title=args["title"],
            rationale=args["rationale"],
            acceptance_criteria=tuple(args["acceptance_criteria"]),
            expected_impact=args["expected_impact"],
            filed_by=ctx.role,
            round_filed=ctx.round,
            depends_on=tuple(args.get("depends_on", ())),
        )
        for dep in issue.depends_on:
            if dep not in self.issues:
                raise HandlerError(f"depends_on references unknown issue {dep}")
        if self._creates_cycle(issue):
            raise HandlerError("depends_on would create a dependency cycle")
        self._next_id += 1
        self.issues[issue.id] = issue
        self._persist()
        return {"issue_id": issue.id}

    def _creates_cycle(self, candidate: Issue) -> bool:
        # Walk up from the new issue's dependencies; ids are filed in order,
        # but tool-driven status edits make an explicit check cheap insurance.
        seen = set()
        stack = list(candidate.depends_on)
        while stack:
            node = stack.pop()
            if node == candidate.id:
                return True
            if node in seen or node not in self.issues:
                continue
            seen.add(node)
            stack.extend(self.issues[node].depends_on)
        return False

    def update_issue_status(self, ctx: SessionContext, args: dict) -> dict:
        issue = self.issues.get(args["issue_id"])
        if issue is None:
            raise HandlerError(f"unknown issue id {args['issue_id']}")
        transition_issue(issue, args["status"])
        self._persist()
        return {"issue_id": issue.id, "status": issue.status}

    def record_finding(self, ctx: SessionContext, args: dict) -> dict:
        # Findings are consumed from the per-invocation tool log; the handler
        # only acknowledges so hints stay attributable to their invocation.
        return {"recorded": True}

    def select_issue_tool(self, ctx: SessionContext, args: dict) -> dict:
        issue = self.issues.get(args["issue_id"])
        if issue is None:
            raise HandlerError(f"unknown issue id {args['issue_id']}")
        if issue.status != "open" or not self._deps_done(issue):
            raise HandlerError(f"issue {issue.id} is not eligible for dispatch")
        self._selected_by_tool = issue.id
        return {"issue_id": issue.id}

    def toolset(self) -> tuple[ToolSpec, ...]:
        return (
            ToolSpec(
                name="file_issue",
                description="File a structured backlog issue for a future round.",
                input_schema={
                    "type": "object",
                    "properties": {
                        "title": {"type": "string", "minLength": 1},
                        "rationale": {"type": "string"},
                        "acceptance_criteria": {
                            "type": "array",
                            "items": {"type": "string"},
                            "minItems": 1,
                        },
                        "expected_impact": {"enum": list(IMPACTS)},
                        "depends_on": {"type": "array", "items": {"type": "integer"}},
                    },
                    "required": ["title", "rationale", "acceptance_criteria", "expected_impact"],
                    "additionalProperties": False,
                },
                handler=self.file_issue,
            ),
            ToolSpec(
                name="update_issue_status",
                description="Move a backlog issue along its status machine.",
                input_schema={
                    "type": "object",
                    "properties": {
                        "issue_id": {"type": "integer"},
                        "status": {"enum": list(STATUSES)},
                    },
                    "required": ["issue_id", "status"],
                    "additionalProperties": False,
                },
                handler=self.update_issue_status,
            ),
            ToolSpec(
                name="record_finding",
                description="Record a performance or review finding for the policy.",
                input_schema={
                    "type": "object",
                    "properties": {"text": {"type": "string", "minLength": 1}},
                    "required": ["text"],
                    "additionalProperties": False,
                },
                handler=self.record_finding,
            ),
        )

    def orchestrator_toolset(self) -> tuple[ToolSpec, ...]:
        select = ToolSpec(
            name="select_issue",
            description="Choose the open issue to dispatch this round.",
            input_schema={
                "type": "object",
                "properties": {"issue_id": {"type": "integer"}},
                "required": ["issue_id"],
                "additionalProperties": False,
            },
            handler=self.select_issue_tool,
        )
        return self.toolset() + (select,)

    def allowed_tools(self, role: AgentRole) -> Optional[Sequence[str]]:
        if role is AgentRole.EVALUATOR:
            return ("record_finding",)
        if role is AgentRole.ORCHESTRATOR:
            return ("select_issue", "file_issue", "update_issue_status", "record_finding")
        return ("file_issue", "record_finding")

    # -- selection ---------------------------------------------------------

    def _deps_done(self, issue: Issue) -> bool:
        return all(
            dep in self.issues and self.issues[dep].status == "done" for dep in issue.depends_on
        )

    def _eligible(self) -> list[Issue]:
        return [i for i in self.issues.values() if i.status == "open" and self._deps_done(i)]

    def select_issue(self, round_index: int) -> Issue:
        open_issues = [i for i in self.issues.values() if i.status == "open"]
        if not open_issues:
            raise Exhausted("no open issues in the backlog")
        eligible = self._eligible()
        if not eligible:
            raise NoEligibleIssue("every open issue is blocked by an unfinished dependency")
        if not self.stub_mode and self.orchestrator_invoker is not None:
            self._selected_by_tool = None
            self.orchestrator_invoker(self, round_index)
            if self._selected_by_tool is not None:
                return self.issues[self._selected_by_tool]
            # A harness that never answered falls back to the deterministic rule.
        eligible.sort(key=lambda i: (IMPACTS.index(i.expected_impact), i.id))
        return eligible[0]

    # -- per-round contract ---------------------------------------------------

    def begin_round(self, round_index: int) -> RoundDirective:
        if round_index == 0 and not self.issues and self.seed_task:
            self.issues[self._next_id] = Issue(
                id=self._next_id,
                title=BOOTSTRAP_TITLE,
                rationale="An empty workspace has nothing to optimize; start from a "
                "correct baseline that the checker accepts.",
                acceptance_criteria=BOOTSTRAP_CRITERIA,
                expected_impact="high",
                round_filed=0,
            )
            self._next_id += 1
            self._persist()
        issue = self.select_issue(round_index)
        transition_issue(issue, "in_progress")
        self._current = issue
        self._persist()
        task_text = f"{issue.title}\n\n{issue.rationale}".strip()
        return RoundDirective(
            start=None,
            task_text=task_text,
            pass_criteria=issue.acceptance_criteria,
            toolset=self.toolset(),
            issue_id=issue.id,
        )

    def end_round(self, directive: RoundDirective, result: RoundResult, round_index: int) -> None:
        issue = self.issues.get(directive.issue_id or -1)
        if issue is None or self._current is None or issue.id != self._current.id:
            raise RoundMismatch("result does not belong to the in-progress issue")
        self._current = None

        if result.status is RoundStatus.VALIDATED:
            if issue.status == "in_progress":
                transition_issue(issue, "done")
            improved = self.best.consider(result.commit)
            line = (
                f"- round {result.commit.round}: {issue.title} -> validated, "
                f"metric {result.commit.metric:g} {result.commit.unit}"
            )
            self.memory.append_line("Directions Tried", line)
            if not improved and self.best.best is not None:
                # Correct but regressed on the headline: fall back to the best.
                self.revert_fn(self.best.best, "validated round regressed on the headline metric")
                self.memory.append_line(
                    "Evidence Against",
                    f"- round {result.commit.round}: {issue.title} regressed the headline; reverted",
                )
        elif result.status is RoundStatus.FAILED_BUDGET:
            issue.attempts += 1
            if issue.status == "in_progress":
                transition_issue(issue, "open")
            detail = result.feedback[0] if result.feedback else "no feedback"
            self.memory.append_line(
                "Directions Tried",
                f"- {issue.title}: failed retry budget (attempt {issue.attempts}); {detail}",
            )
        else:  # error
            issue.attempts += 1
            if issue.status == "in_progress":
                transition_issue(issue, "open")
            detail = result.feedback[0] if result.feedback else "environment error"
            self.memory.append_line("Platform Notes", f"- {issue.title}: round errored; {detail}")
        self._persist()

    def backlog_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in STATUSES}
        for issue in self.issues.values():
            counts[issue.status] += 1
        return counts


# -- evolutionary ----------------------------------------------------------------


@dataclass
class EvolutionaryState:
    population: list[tuple[Checkpoint, float]] = field(default_factory=list)
    capacity: int = 8
    rng_seed: int = 42


class EvolutionaryPolicy:
    """Population search over checkpoints; a scalar score is the whole state."""

    name = "evolutionary"
    TOURNAMENT = 3

    def __init__(
        self,
        workspace: Workspace,
        seed_task: Optional[str] = None,
        rng_seed: int = 42,
        capacity: int = 8,
        epsilon_rel: float = 0.005,
        revert_fn: Optional[RevertFn] = None,
    ):
        self.workspace = workspace
        self.seed_task = seed_task
        self.state = EvolutionaryState(capacity=capacity, rng_seed=rng_seed)
        self._rng = DeterministicRng(rng_seed)
        self.best = BestTracker(epsilon_rel=epsilon_rel)
        self.revert_fn = revert_fn or _default_revert(workspace)
        self._parent: Optional[Checkpoint] = None
        self._tools = _finding_only_toolset()

    def toolset(self) -> tuple[ToolSpec, ...]:
        return self._tools

    def allowed_tools(self, role: AgentRole) -> Optional[Sequence[str]]:
        return ("record_finding",)

    def select_parent(self) -> Checkpoint:
        population = self.state.population
        if not population:
            raise Exhausted("empty population")
        k = min(self.TOURNAMENT, len(population))
        indices: list[int] = []
        while len(indices) < k:
            i = self._rng.next_index(len(population))
            if i not in indices:
                indices.append(i)
        entrants = [population[i] for i in indices]
        higher = entrants[0][0].higher_is_better
        entrants.sort(key=lambda pair: pair[1], reverse=higher)
        return entrants[0][0]

    def begin_round(self, round_index: int) -> RoundDirective:
        if not self.state.population:
            if self.seed_task is None:
                raise Exhausted("empty population and no seed task configured")
            return RoundDirective(
                start=None,
                task_text=self.seed_task,
                pass_criteria=DEFAULT_CRITERIA,
                toolset=self.toolset(),
            )
        parent = self.select_parent()
        self._parent = parent
        task = (
            f"Improve the serving system starting from checkpoint {parent.commit[:12]} "
            f"(round {parent.round}, metric {parent.metric:g} {parent.unit}). "
            "Change one thing; keep the checker green."
        )
        return RoundDirective(
            start=parent,
            task_text=task,
            pass_criteria=DEFAULT_CRITERIA,
            toolset=self.toolset(),
        )

    def record_child(self, parent: Optional[Checkpoint], result: RoundResult) -> None:
        if result.status is not RoundStatus.VALIDATED or result.commit is None:
            return
        cp = result.commit
        self.state.population.append((cp, cp.metric))
        if len(self.state.population) > self.state.capacity:
            higher = cp.higher_is_better
            # Evict the worst score; ties go to the older round.
            worst = min(
                range(len(self.state.population)),
                key=lambda i: (
                    self.state.population[i][1] if higher else -self.state.population[i][1],
                    self.state.population[i][0].round,
                ),
            )
            self.state.population.pop(worst)

    def end_round(self, directive: RoundDirective, result: RoundResult, round_index: int) -> None:
        self.record_child(self._parent, result)
        self._parent = None
        if result.status is RoundStatus.VALIDATED and result.commit is not None:
            improved = self.best.consider(result.commit)
            if not improved and self.best.best is not None:
                self.revert_fn(self.best.best, "validated round regressed on the headline metric")

    def backlog_counts(self) -> dict[str, int]:
        return {s: 0 for s in STATUSES}


# -- Ralph ----------------------------------------------------------------------


class RalphPolicy:
    """The same task every round, with the whole prior history as context."""

    name = "ralph"

    def __init__(
        self,
        workspace: Workspace,
        task_text: str,
        epsilon_rel: float = 0.005,
        revert_fn: Optional[RevertFn] = None,
    ):
        if not task_text.strip():
            raise PolicyError("ralph needs a fixed task text")
        self.workspace = workspace
        self.task_text = task_text
        self.best = BestTracker(epsilon_rel=epsilon_rel)
        self.revert_fn = revert_fn or _default_revert(workspace)
        self._history_path = workspace.root / "RALPH_HISTORY.md"
        self._tools = _finding_only_toolset()

    def toolset(self) -> tuple[ToolSpec, ...]:
        return self._tools

    def allowed_tools(self, role: AgentRole) -> Optional[Sequence[str]]:
        return ("record_finding",)

    def _history(self) -> str:
        if self._history_path.exists():
            return self._history_path.read_text(encoding="utf-8").strip("\n")
        return ""

    def begin_round(self, round_index: int) -> RoundDirective:
        history = self._history()
        task = f"{self.task_text}\n\n## HISTORY\n{history}\n"
        return RoundDirective(
            start=None,
            task_text=task,
            pass_criteria=DEFAULT_CRITERIA,
            toolset=self.toolset(),
        )

    def end_round(self, directive: RoundDirective, result: RoundResult, round_index: int) -> None:
        if result.status is RoundStatus.VALIDATED and result.commit is not None:
            summary = (
                f"- round {result.commit.round}: validated, metric "
                f"{result.commit.metric:g} {result.commit.unit}"
            )
            improved = self.best.consider(result.commit)
            if not improved and self.best.best is not None:
                self.revert_fn(self.best.best, "validated round regressed on the headline metric")
                summary += " (regressed; reverted to best)"
        else:
            detail = result.feedback[0] if result.feedback else "no feedback"
            summary = f"- round {round_index}: {result.status.value}; {detail}"
        history = self._history()
        self._history_path.write_text(
            (history + "\n" + summary).strip("\n") + "\n", encoding="utf-8"
        )

    def backlog_counts(self) -> dict[str, int]:
        return {s: 0 for s in STATUSES}


def _finding_only_toolset() -> tuple[ToolSpec, ...]:
    def record(ctx: SessionContext, args: dict) -> dict:
        return {"recorded": True}

    return (
        ToolSpec(
            name="record_finding",
            description="Record a performance or review finding for the policy.",
            input_schema={
                "type": "object",
                "properties": {"text": {"type": "string", "minLength": 1}},
                "required": ["text"],
                "additionalProperties": False,
            },
            handler=record,
        ),
    )
