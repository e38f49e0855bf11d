"""
The planning expert.

Proposes whole-task plans, picks the next instruction for the executor,
replans after failures, writes retrospective feedback on finished episodes
and keeps the capped memory of that feedback. Two backends: a breadth-first
search oracle over the symbolic world, and a wire backend that prompts an
external completion endpoint.
"""

import logging
import re
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Set, Tuple

from .models import BaseLLM, WireConfig, create_model_from_config
from .translator import FeedbackLine, PromptBundle, TextObs, build_prompt, format_step
from .world import (
    OBJECT_KINDS,
    RECEPTACLE_KINDS,
    VERB_FLAG,
    ActionParseError,
    SkillAction,
    TaskSpec,
    VisualObs,
    WorldState,
    check_success,
    parse_action,
    split_id,
    transition,
)

logger = logging.getLogger(__name__)

PLAN_EXHAUSTED = SkillAction("noop", ())
EXHAUSTED_CODE = "plan-exhausted"
MAX_SEARCH_NODES = 200_000

_STEP_LINE = re.compile(r"^\s*>?\s*step\s+(\d+)\s*:\s*(.+?)\s*$", re.IGNORECASE)
_THINK_LINE = re.compile(r"^\s*>?\s*think\s*:\s*(.+?)\s*$", re.IGNORECASE)
_GERUNDS = {
    "goto": "going", "open": "opening", "close": "closing", "take": "taking", "put": "putting",
    "heat": "heating", "cool": "cooling", "clean": "cleaning", "use": "using",
}


class UnsolvableTaskError(RuntimeError):
    """Raised when search finds no plan; for generated tasks this is a generator bug."""


class PlanParseError(ValueError):
    """Raised when a wire response holds no usable step lines."""


class NoProgressError(RuntimeError):
    """Raised when a replan reproduces the plan it was meant to fix."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plan:
    steps: Tuple[SkillAction, ...]
    rationale: Tuple[str, ...] = ()
    offset: int = 0  # steps before this index were already executed when the plan was adopted

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("A plan needs at least one step")
        if not 0 <= self.offset <= len(self.steps):
            raise ValueError(f"Plan offset {self.offset} outside 0..{len(self.steps)}")

    def serialize(self) -> str:
        return "\n".join(format_step(i, s.surface_form) for i, s in enumerate(self.steps, start=1))


@dataclass(frozen=True)
class TextStep:
    obs: TextObs
    action: SkillAction
    feedback: FeedbackLine


@dataclass(frozen=True)
class VisualStep:
    """Raster seen before a step, with the simulator state it was rendered from."""

    obs: VisualObs
    state: WorldState


@dataclass(frozen=True)
class FeedbackRecord:
    task_id: str
    trial_index: int
    failed_step: Optional[SkillAction]
    diagnosis: str
    corrective_hint: str
    final_success: bool

    def __post_init__(self) -> None:
        if (self.failed_step is None) != self.final_success:
            raise ValueError("failed_step must be set exactly when the episode failed")

    def to_text(self) -> str:
        if self.final_success:
            return f"Succeeded. {self.diagnosis}."
        return (
            f'Failed at "{self.failed_step.surface_form}". '
            f"Diagnosis: {self.diagnosis}. Hint: {self.corrective_hint}."
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "trial_index": self.trial_index,
            "failed_step": self.failed_step.surface_form if self.failed_step else None,
            "diagnosis": self.diagnosis,
            "corrective_hint": self.corrective_hint,
            "final_success": self.final_success,
        }


@dataclass(frozen=True)
class MemoryPool:
    records: Tuple[FeedbackRecord, ...] = ()
    cap: int = 3

    def __post_init__(self) -> None:
        if self.cap < 1:
            raise ValueError("Memory cap must be at least 1")
        if len(self.records) > self.cap:
            raise ValueError(f"{len(self.records)} records exceed the cap of {self.cap}")

    def texts(self) -> Tuple[str, ...]:
        return tuple(r.to_text() for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


def push_memory(pool: MemoryPool, record: FeedbackRecord) -> MemoryPool:
    """Append a record, evicting the oldest once the cap is exceeded."""
    kept: Deque[FeedbackRecord] = deque(pool.records, maxlen=pool.cap)
    kept.append(record)
    return MemoryPool(tuple(kept), pool.cap)


@dataclass
class PlanContext:
    task: TaskSpec
    current_obs: TextObs
    memory: MemoryPool = field(default_factory=MemoryPool)
    text_history: List[TextStep] = field(default_factory=list)
    world: Optional[WorldState] = None  # ground truth for the oracle; the wire backend never reads it
    plan_adopted_at: int = 0

    def bundle(self, upto: Optional[int] = None) -> PromptBundle:
        history = self.text_history if upto is None else self.text_history[:upto]
        return PromptBundle(
            environment_text=self.current_obs.room_description,
            instruction_text=self.task.instruction,
            history=tuple((h.action.surface_form, h.feedback) for h in history),
            memory_texts=self.memory.texts(),
            memory_cap=self.memory.cap,
        )


@dataclass
class PlannerBackend:
    kind: str = "oracle"
    wire: Optional[WireConfig] = None
    model: Optional[BaseLLM] = None
    prompts: Dict[str, str] = field(default_factory=dict)
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.kind not in ("oracle", "wire"):
            raise ValueError(f"Unknown planner backend {self.kind!r}")
        if self.kind == "wire" and self.model is None:
            raise ValueError("The wire backend needs a model")

    @classmethod
    def from_config(
        cls, config: Dict[str, Any], model: Optional[BaseLLM] = None, audit_dir: Optional[Path] = None,
    ) -> "PlannerBackend":
        """A backend from the planner section; wire exchanges are audited under audit_dir when given."""
        section = config.get("planner", {})
        kind = section.get("backend", "oracle")
        if kind == "oracle":
            return cls(kind="oracle")
        if model is None:
            model = create_model_from_config(config, audit_dir=audit_dir)
        return cls(
            kind="wire",
            wire=WireConfig.from_config(config),
            model=model,
            prompts=dict(config.get("prompts", {})),
            max_retries=int(section.get("max_retries", 2)),
        )

    def prompt_text(self, key: str) -> str:
        if key not in self.prompts:
            raise KeyError(f"No prompt template {key!r} configured")
        return self.prompts[key]


@dataclass
class PlannerErrorLog:
    """Counts of planner mistakes, one entry per failed call."""

    parse_failures: int = 0
    no_progress: int = 0
    failed_plans: int = 0
    plans: int = 0

    @property
    def total(self) -> int:
        return self.parse_failures + self.no_progress + self.failed_plans

    def merge(self, other: "PlannerErrorLog") -> "PlannerErrorLog":
        return PlannerErrorLog(
            self.parse_failures + other.parse_failures,
            self.no_progress + other.no_progress,
            self.failed_plans + other.failed_plans,
            self.plans + other.plans,
        )


# ---------------------------------------------------------------------------
# Oracle search
# ---------------------------------------------------------------------------

def exploration_order(state: WorldState, object_kind: str) -> List[str]:
    """
    Receptacles in the order the oracle searches them: kinds where the
    object usually lives first, in catalog order, then the rest
    alphabetically; indices ascending within a kind.
    """
    likely = OBJECT_KINDS[object_kind].likely

    def rank(rid: str) -> Tuple[int, str, int]:
        kind, index = split_id(rid)
        if kind in likely:
            return likely.index(kind), "", index
        return len(likely), kind, index

    return sorted((r.id for r in state.receptacles), key=rank)


def _known_objects(state: WorldState) -> List[str]:
    known = [oid for r in state.receptacles if r.id in state.observed for oid in r.contents]
    return known + list(state.inventory)


def _located(state: WorldState, task: TaskSpec) -> bool:
    goal = task.goal_predicate
    known = _known_objects(state)
    kinds = [state.get_object(o).kind for o in known]
    if kinds.count(goal.object_kind) < goal.count:
        return False
    return goal.light_kind is None or goal.light_kind in kinds


def _explore(state: WorldState, task: TaskSpec) -> Tuple[WorldState, List[SkillAction]]:
    steps: List[SkillAction] = []
    order = exploration_order(state, task.goal_predicate.object_kind)
    while not _located(state, task):
        pending = [rid for rid in order if rid not in state.observed]
        if not pending:
            raise UnsolvableTaskError(f"{task.task_id}: not enough target objects in the world")
        rid = pending[0]
        recep = state.receptacle(rid)
        moves: List[SkillAction] = []
        if state.agent_facing != rid or recep.accessible:
            moves.append(SkillAction("goto", (rid,)))
        if not recep.accessible:
            moves.append(SkillAction("open", (rid,)))
        for action in moves:
            state, outcome, _ = transition(state, action, honor_stuck=False)
            if not outcome.success:
                raise UnsolvableTaskError(f"{task.task_id}: exploration step {action} failed")
            steps.append(action)
    return state, steps


def _search_key(state: WorldState) -> tuple:
    return state.agent_pos, state.agent_facing, state.inventory, state.receptacles, state.objects


def _relevance(state: WorldState, task: TaskSpec) -> Tuple[Set[str], Set[str], List[str]]:
    goal = task.goal_predicate
    known = _known_objects(state)
    objects = {o for o in known if state.get_object(o).kind == goal.object_kind}
    lamps = {o for o in known if goal.light_kind and state.get_object(o).kind == goal.light_kind}
    objects |= set(state.inventory)
    wanted_kinds = {goal.destination_kind, goal.appliance_kind} - {None}
    receptacles = {r.id for r in state.receptacles if r.kind in wanted_kinds}
    receptacles |= {state.location_of(o) for o in objects | lamps} - {"inventory", None}
    if state.agent_facing:
        receptacles.add(state.agent_facing)
    ordered = [rid for rid in exploration_order(state, goal.object_kind) if rid in receptacles]
    return objects, lamps, ordered


def _search_actions(
    state: WorldState, task: TaskSpec, objects: Set[str], lamps: Set[str], receptacles: List[str]
) -> List[SkillAction]:
    goal = task.goal_predicate
    actions = [SkillAction("goto", (rid,)) for rid in receptacles if rid != state.agent_facing]
    recep = state.facing
    if recep is None:
        return actions
    if recep.openable and not recep.is_open:
        actions.append(SkillAction("open", (recep.id,)))
    held = state.held
    if recep.accessible and held is None:
        actions.extend(SkillAction("take", (o, recep.id)) for o in recep.contents if o in objects)
    if held is not None:
        is_target = state.get_object(held).kind == goal.object_kind
        if recep.accessible and (not is_target or recep.kind == goal.destination_kind):
            actions.append(SkillAction("put", (held, recep.id)))
        flag = RECEPTACLE_KINDS[recep.kind].appliance
        if is_target and flag in goal.required_flags:
            verb = next(v for v, f in VERB_FLAG.items() if f == flag)
            actions.append(SkillAction(verb, (held, recep.id)))
    if recep.accessible:
        actions.extend(SkillAction("use", (o,)) for o in recep.contents if o in lamps)
    return actions


def _breadth_first(state: WorldState, task: TaskSpec) -> List[SkillAction]:
    objects, lamps, receptacles = _relevance(state, task)
    queue: Deque[Tuple[WorldState, List[SkillAction]]] = deque([(state, [])])
    seen = {_search_key(state)}
    while queue:
        current, path = queue.popleft()
        for action in _search_actions(current, task, objects, lamps, receptacles):
            nxt, outcome, _ = transition(current, action, honor_stuck=False)
            if not outcome.success:
                continue
            key = _search_key(nxt)
            if key in seen:
                continue
            if check_success(nxt, task):
                return path + [action]
            seen.add(key)
            if len(seen) > MAX_SEARCH_NODES:
                raise UnsolvableTaskError(f"{task.task_id}: search exceeded {MAX_SEARCH_NODES} states")
            queue.append((nxt, path + [action]))
    raise UnsolvableTaskError(f"{task.task_id}: no plan reaches the goal")


def oracle_search(state: WorldState, task: TaskSpec) -> Plan:
    """
    Deterministic expert plan from a state.

    Unobserved receptacles are searched in exploration order until enough
    target objects (and the lamp, for Look tasks) are known; the rest of
    the plan is a shortest action sequence found by breadth-first search
    over the symbolic transition model. Stuck receptacles are invisible to
    the search.

    Raises:
        ValueError: if the goal already holds in the state
        UnsolvableTaskError: if no plan exists
    """
    if check_success(state, task):
        raise ValueError(f"{task.task_id}: goal already satisfied, nothing to plan")
    return _cached_plan(replace(state, step_count=0, rng_seed=0), task)


@lru_cache(maxsize=8192)
def _cached_plan(state: WorldState, task: TaskSpec) -> Plan:
    explored, head = _explore(state, task)
    tail = _breadth_first(explored, task)
    return Plan(tuple(head + tail))


def faithful_execution(state: WorldState, task: TaskSpec, plan: Plan) -> bool:
    """True iff executing the unexecuted part of the plan reaches the goal, stuck receptacles aside."""
    for action in plan.steps[plan.offset:]:
        state, outcome, _ = transition(state, action, honor_stuck=False)
        if not outcome.success:
            return False
        if check_success(state, task):
            return True
    return check_success(state, task)


# ---------------------------------------------------------------------------
# Wire parsing
# ---------------------------------------------------------------------------

def parse_plan(text: str, marker: Optional[str] = None) -> Plan:
    """
    Parse "step k: <action>" lines into a Plan.

    With a marker, only lines after its last occurrence count. Lines of the
    form "think: ..." become the rationale.

    Raises:
        PlanParseError: if no step lines are found or one does not parse
    """
    if marker and marker in text:
        head, _, text = text.rpartition(marker)
        rationale_source = head + text
    else:
        rationale_source = text
    steps = []
    for line in text.splitlines():
        m = _STEP_LINE.match(line)
        if m is None:
            continue
        try:
            steps.append(parse_action(m.group(2)))
        except ActionParseError as e:
            raise PlanParseError(f"Step {m.group(1)} does not parse: {m.group(2)!r}") from e
    if not steps:
        raise PlanParseError("Response contains no step lines")
    rationale = tuple(
        m.group(1) for m in (_THINK_LINE.match(line) for line in rationale_source.splitlines()) if m
    )
    return Plan(tuple(steps), rationale)


def _ask(backend: PlannerBackend, prompt: str, parse: Callable[[str], Any]) -> Any:
    last_error: Optional[PlanParseError] = None
    for attempt in range(backend.max_retries + 1):
        response = backend.model.prompt(prompt)
        try:
            return parse(response)
        except PlanParseError as e:
            last_error = e
            logger.warning(f"Unparseable planner response (attempt {attempt + 1}): {e}")
    raise PlanParseError(f"No parseable response after {backend.max_retries + 1} attempts") from last_error


# ---------------------------------------------------------------------------
# Planner operations
# ---------------------------------------------------------------------------

def propose_plan(ctx: PlanContext, backend: PlannerBackend) -> Plan:
    """
    Propose a whole-task plan.

    Raises:
        PlanParseError: wire responses without usable steps, after retries
        WireTimeoutError: if the endpoint keeps timing out
    """
    if backend.kind == "oracle":
        if ctx.world is None:
            raise ValueError("The oracle backend needs the world state in the context")
        return oracle_search(ctx.world, ctx.task)
    prompt = (
        backend.prompt_text("plan_header")
        + build_prompt(ctx.bundle())
        + backend.prompt_text("action_sequence")
        + "\n"
    )
    return _ask(backend, prompt, parse_plan)


def _consumed(ctx: PlanContext, plan: Plan, upto: Optional[int] = None) -> int:
    i = plan.offset
    for entry in ctx.text_history[ctx.plan_adopted_at:upto]:
        if i < len(plan.steps) and entry.action == plan.steps[i]:
            i += 1
    return i


def next_step(ctx: PlanContext, plan: Plan) -> SkillAction:
    """
    First plan step not yet executed since the plan was adopted, or
    PLAN_EXHAUSTED once every step has been tried.
    """
    i = _consumed(ctx, plan)
    return plan.steps[i] if i < len(plan.steps) else PLAN_EXHAUSTED


def diagnose(action: Optional[SkillAction], code: str) -> str:
    """One-line account of why an action failed."""
    if code == EXHAUSTED_CODE or action is None:
        return "the plan ran out before the task was completed"
    rid = action.receptacle
    oid = action.object
    if code == "closed-receptacle":
        return f"{rid or 'the receptacle'} is closed"
    if code == "stuck":
        return f"{rid} is stuck and did not open"
    if code == "not-here":
        return f"the agent is not at {rid}" if rid else f"the agent is not where {oid} is"
    if code == "hands-full":
        return "the agent is already carrying something"
    if code == "not-found":
        return f"{oid} is not in {rid}" if action.verb == "take" else f"the agent is not carrying {oid}"
    return f"{action.surface_form} is not possible"


def replan(ctx: PlanContext, old_plan: Plan, failure: FeedbackLine, backend: PlannerBackend) -> Plan:
    """
    Revise a plan after a failed step or after it ran out.

    The executed prefix is kept, minus the failed step itself unless it
    failed on a stuck receptacle, which is simply tried again. The new plan's
    offset marks where execution resumes.

    A failed action the plan never asked for leaves the plan valid, so the
    revised plan may repeat the old steps; it is re-anchored after the
    failure all the same.

    Raises:
        ValueError: if failure reports success
        NoProgressError: if a failed plan step or a used-up plan comes back unchanged
        PlanParseError: wire responses without usable steps, after retries
    """
    if failure.code == "ok":
        raise ValueError("replan needs a failed step")
    consumed = _consumed(ctx, old_plan)
    prefix = list(old_plan.steps[:consumed])
    last = ctx.text_history[-1] if ctx.text_history else None
    failed_action = last.action if last is not None and failure.code != EXHAUSTED_CODE else None
    planned = failed_action is None or _consumed(ctx, old_plan, len(ctx.text_history) - 1) < consumed
    if planned and failed_action is not None and failure.code != "stuck":
        prefix.pop()
    failed_index = len(prefix) + 1
    reason = diagnose(failed_action, failure.code)

    if backend.kind == "oracle":
        if ctx.world is None:
            raise ValueError("The oracle backend needs the world state in the context")
        remainder = oracle_search(ctx.world, ctx.task).steps
        think = f"step {failed_index} is failed to execute. {reason}."
        new_plan = Plan(tuple(prefix) + remainder, (think,), offset=len(prefix))
    else:
        prompt = (
            backend.prompt_text("plan_header")
            + build_prompt(ctx.bundle())
            + backend.prompt_text("action_sequence")
            + "\n"
            + old_plan.serialize()
            + "\n"
            + backend.prompt_text("replan").format(step_index=failed_index, diagnosis=f"{reason}.")
        )
        parsed = _ask(backend, prompt, lambda text: parse_plan(text, "Replanned Action Sequence:"))
        common = 0
        while common < min(len(prefix), len(parsed.steps)) and parsed.steps[common] == prefix[common]:
            common += 1
        new_plan = replace(parsed, offset=common)

    if planned and new_plan.steps == old_plan.steps:
        raise NoProgressError(f"{ctx.task.task_id}: replan reproduced the failed plan")
    logger.debug("Replanned %s at step %d: %s", ctx.task.task_id, failed_index, reason)
    return new_plan


def _parse_single_step(text: str) -> SkillAction:
    for line in text.splitlines():
        m = _STEP_LINE.match(line)
        candidate = m.group(2) if m else line.strip()
        if not candidate:
            continue
        try:
            return parse_action(candidate)
        except ActionParseError:
            continue
    raise PlanParseError(f"No action in response {text!r}")


def corrected_action(ctx: PlanContext, t: int, backend: PlannerBackend) -> SkillAction:
    """
    The expert's action for step t of an episode.

    For the oracle, ctx.world must hold the state before step t; the
    answer is the first step of the oracle plan from there.
    """
    if backend.kind == "oracle":
        if ctx.world is None:
            raise ValueError("The oracle backend needs the world state in the context")
        return oracle_search(ctx.world, ctx.task).steps[0]
    prompt = (
        backend.prompt_text("plan_header")
        + build_prompt(ctx.bundle(upto=t))
        + backend.prompt_text("next_action").format(step_index=t + 1)
    )
    return _ask(backend, prompt, _parse_single_step)


def corrected_plan(ctx: PlanContext) -> Optional[Plan]:
    """
    The oracle's plan from the world a plan was adopted in, or None when
    the goal already holds there or no plan exists.

    Raises:
        ValueError: if the context carries no world state
    """
    if ctx.world is None:
        raise ValueError("A corrected plan needs the world state in the context")
    if check_success(ctx.world, ctx.task):
        return None
    try:
        return oracle_search(ctx.world, ctx.task)
    except UnsolvableTaskError as e:
        logger.warning(str(e))
        return None


def _earliest_failure(tau_l: Sequence[TextStep]) -> Optional[int]:
    return next((i for i, step in enumerate(tau_l) if step.feedback.code != "ok"), None)


def _parse_retrospection(text: str) -> Tuple[str, str]:
    diagnosis = hint = None
    for line in text.splitlines():
        stripped = line.strip().lstrip(">").strip()
        if stripped.lower().startswith("diagnosis:"):
            diagnosis = stripped.split(":", 1)[1].strip().rstrip(".")
        elif stripped.lower().startswith("hint:"):
            hint = stripped.split(":", 1)[1].strip().rstrip(".")
    if not diagnosis or not hint:
        raise PlanParseError("Retrospection lacks a Diagnosis or Hint line")
    return diagnosis, hint


def retrospect(
    tau_l: Sequence[TextStep],
    tau_v: Sequence[VisualStep],
    backend: PlannerBackend,
    *,
    task: TaskSpec,
    success: bool,
    trial_index: int = 0,
) -> FeedbackRecord:
    """
    Retrospective feedback on a finished episode.

    Args:
        tau_l: Textual trajectory, one entry per executed step
        tau_v: Visual trajectory of the same episode, aligned with tau_l
        backend: Planner backend
        task: The episode's task
        success: Whether the episode reached the goal
        trial_index: Trial the episode belongs to

    Returns:
        FeedbackRecord naming the earliest failed step (the last step when
        the episode failed without any failed step)
    """
    if len(tau_l) != len(tau_v):
        raise ValueError("Textual and visual trajectories differ in length")
    if success:
        return FeedbackRecord(
            task.task_id, trial_index, None,
            f"completed the task in {len(tau_l)} steps", "keep the same plan", True,
        )
    if not tau_l:
        raise ValueError("Cannot retrospect on an empty failed episode")

    j = _earliest_failure(tau_l)
    index = j if j is not None else len(tau_l) - 1
    failed = tau_l[index].action
    code = tau_l[index].feedback.code

    if backend.kind == "wire":
        lines = []
        for k, step in enumerate(tau_l, start=1):
            lines.append(format_step(k, step.action.surface_form))
            lines.append(f"Env. feedback: {step.feedback.text}")
        prompt = backend.prompt_text("retrospect").format(trajectory="\n".join(lines), verdict="Failure")
        diagnosis, hint = _ask(backend, prompt, _parse_retrospection)
        return FeedbackRecord(task.task_id, trial_index, failed, diagnosis, hint, False)

    if j is None:
        diagnosis = "the episode ended before the task was completed"
    else:
        diagnosis = diagnose(failed, code)
    if code == "stuck":
        hint = f"retry open {failed.receptacle}"
    else:
        try:
            reference = oracle_search(tau_v[index].state, task).steps[0]
            if reference == failed:
                hint = f"{reference.surface_form} sooner"
            else:
                hint = f"{reference.surface_form} before {_GERUNDS.get(failed.verb, failed.verb)}"
        except (UnsolvableTaskError, ValueError):
            hint = "start the task over from the beginning"
    return FeedbackRecord(task.task_id, trial_index, failed, diagnosis, hint, False)
