"""
Tests for the planning expert.

This module tests:
1. Oracle plans and exploration order
2. Step tracking and replanning after a failed instruction
3. The wire backend against scripted responses
4. Retrospection and the capped memory pool
"""

from dataclasses import replace

import numpy as np
import pytest

from coplan.config import load_config
from coplan.models import ScriptedModel
from coplan.planner import (
    EXHAUSTED_CODE,
    PLAN_EXHAUSTED,
    FeedbackRecord,
    MemoryPool,
    NoProgressError,
    Plan,
    PlanContext,
    PlannerBackend,
    PlanParseError,
    TextStep,
    VisualStep,
    corrected_action,
    exploration_order,
    faithful_execution,
    next_step,
    oracle_search,
    parse_plan,
    propose_plan,
    push_memory,
    replan,
    retrospect,
)
from coplan.translator import FeedbackLine, transcript_header, translate_outcome, translate_state
from coplan.world import (
    TASK_TYPES,
    WorldParams,
    check_success,
    generate_task,
    parse_action,
    render_visual,
    step_skill,
    transition,
    valid_actions,
)

from conftest import assert_golden

EXPECTED_PLAN = [
    "go to cabinet 1",
    "go to cabinet 2",
    "open cabinet 2",
    "take spraybottle 2 from cabinet 2",
    "go to toilet 1",
    "put spraybottle 2 in/on toilet 1",
]
FLAWED_PLAN = [
    "go to cabinet 1",
    "go to cabinet 2",
    "take spraybottle 2 from cabinet 2",
    "go to toilet 1",
    "put spraybottle 2 in/on toilet 1",
]


def forms(plan):
    return [s.surface_form for s in plan.steps]


def plan_of(lines):
    return Plan(tuple(parse_action(line) for line in lines))


def play(ctx, lines):
    """Execute surface forms, recording them in the context's history."""
    state = ctx.world
    for line in lines:
        action = parse_action(line)
        obs = translate_state(state)
        state, outcome, _ = step_skill(state, action)
        ctx.text_history.append(TextStep(obs, action, translate_outcome(outcome, action, state)))
    ctx.world = state
    ctx.current_obs = translate_state(state)
    return ctx.text_history[-1].feedback


def wire_backend(responses):
    config = load_config()
    return PlannerBackend(
        kind="wire", model=ScriptedModel(responses), prompts=config["prompts"], max_retries=2,
    )


def test_exploration_order_prefers_likely_kinds(bathroom):
    order = exploration_order(bathroom, "spraybottle")
    assert order[:6] == ["cabinet 1", "cabinet 2", "cabinet 3", "cabinet 4", "countertop 1", "toilet 1"]
    assert order[-1] == "towelholder 1"


def test_oracle_plan_for_spraybottle(bathroom, spraybottle_task):
    plan = oracle_search(bathroom, spraybottle_task)
    assert forms(plan) == EXPECTED_PLAN
    assert faithful_execution(bathroom, spraybottle_task, plan)
    assert not faithful_execution(bathroom, spraybottle_task, plan_of(FLAWED_PLAN))


def fully_observed(world):
    return replace(world, observed=frozenset(r.id for r in world.receptacles))


def shortest_plan_length(world, task, limit):
    """Exhaustive breadth-first search over every valid action, up to limit steps."""
    frontier = [world]
    seen = {(world.agent_pos, world.agent_facing, world.inventory, world.receptacles, world.objects)}
    for depth in range(1, limit + 1):
        reached = []
        for state in frontier:
            for action in valid_actions(state):
                nxt, outcome, _ = transition(state, action, honor_stuck=False)
                if not outcome.success:
                    continue
                if check_success(nxt, task):
                    return depth
                key = (nxt.agent_pos, nxt.agent_facing, nxt.inventory, nxt.receptacles, nxt.objects)
                if key not in seen:
                    seen.add(key)
                    reached.append(nxt)
        frontier = reached
    return None


def test_oracle_plan_is_shortest_in_the_bathroom(bathroom, spraybottle_task):
    plan = oracle_search(fully_observed(bathroom), spraybottle_task)
    assert len(plan.steps) == shortest_plan_length(fully_observed(bathroom), spraybottle_task, 6) == 5

    state = bathroom
    for text in EXPECTED_PLAN[:3]:
        state, _, _ = step_skill(state, parse_action(text))
    rest = oracle_search(state, spraybottle_task)
    assert [a.surface_form for a in rest.steps] == EXPECTED_PLAN[3:]
    assert shortest_plan_length(fully_observed(state), spraybottle_task, 3) == 3


@pytest.mark.slow
@pytest.mark.parametrize("task_type", TASK_TYPES)
def test_oracle_plan_is_shortest_on_small_worlds(task_type):
    params = WorldParams(min_receptacles=5, max_receptacles=8, min_objects=6, max_objects=8)
    for seed in range(5):
        world, task = generate_task(seed, task_type, params=params)
        world = fully_observed(world)
        plan = oracle_search(world, task)
        assert shortest_plan_length(world, task, len(plan.steps)) == len(plan.steps), task.task_id


def test_oracle_rejects_solved_state(bathroom, spraybottle_task):
    state = bathroom
    for line in EXPECTED_PLAN:
        state, _, _ = step_skill(state, parse_action(line))
    with pytest.raises(ValueError):
        oracle_search(state, spraybottle_task)


def test_next_step_consumes_attempted_steps(bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    plan = plan_of(FLAWED_PLAN)
    assert next_step(ctx, plan).surface_form == "go to cabinet 1"
    play(ctx, ["go to cabinet 1", "go to sinkbasin 1"])
    assert next_step(ctx, plan).surface_form == "go to cabinet 2", "a deviation does not consume a step"
    play(ctx, ["go to cabinet 2", "take spraybottle 2 from cabinet 2"])
    assert next_step(ctx, plan).surface_form == "go to toilet 1", "a failed attempt still consumes its step"
    play(ctx, ["go to toilet 1", "put spraybottle 2 in/on toilet 1"])
    assert next_step(ctx, plan) == PLAN_EXHAUSTED


def test_oracle_replan_inserts_open(bathroom, spraybottle_task):
    """After the closed-cabinet failure the replanned sequence opens cabinet 2."""
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    old = plan_of(FLAWED_PLAN)
    failure = play(ctx, FLAWED_PLAN[:3])
    assert failure.text == "[Action failed] cabinet 2."
    new = replan(ctx, old, failure, PlannerBackend())
    assert forms(new) == EXPECTED_PLAN
    assert new.offset == 2
    assert new.rationale == ("step 3 is failed to execute. cabinet 2 is closed.",)
    ctx.plan_adopted_at = len(ctx.text_history)
    assert next_step(ctx, new).surface_form == "open cabinet 2"


def test_replan_after_stuck_repeats_the_open(stuck_bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(stuck_bathroom), world=stuck_bathroom)
    old = oracle_search(stuck_bathroom, spraybottle_task)
    failure = play(ctx, EXPECTED_PLAN[:3])
    assert failure.code == "stuck"
    new = replan(ctx, old, failure, PlannerBackend())
    assert new.offset == 3, "the stuck open stays in the executed prefix"
    ctx.plan_adopted_at = len(ctx.text_history)
    assert next_step(ctx, new).surface_form == "open cabinet 2"


def test_replan_after_a_deviation_keeps_the_steps(bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    old = oracle_search(bathroom, spraybottle_task)
    failure = play(ctx, ["take spraybottle 2 from cabinet 2"])
    assert failure.code == "not-here"
    new = replan(ctx, old, failure, PlannerBackend())
    assert forms(new) == EXPECTED_PLAN
    assert new.offset == 0
    ctx.plan_adopted_at = len(ctx.text_history)
    assert next_step(ctx, new).surface_form == "go to cabinet 1"


def test_replanned_plan_reaches_the_goal(bathroom, stuck_bathroom, spraybottle_task):
    """Executing the replanned remainder from the failure state completes the task."""
    cases = [
        (bathroom, plan_of(FLAWED_PLAN), FLAWED_PLAN[:3]),
        (stuck_bathroom, oracle_search(stuck_bathroom, spraybottle_task), EXPECTED_PLAN[:3]),
    ]
    for world, old, executed in cases:
        ctx = PlanContext(spraybottle_task, translate_state(world), world=world)
        failure = play(ctx, executed)
        assert failure.code in ("closed-receptacle", "stuck")
        new = replan(ctx, old, failure, PlannerBackend())
        state = ctx.world
        for action in new.steps[new.offset:]:
            state, outcome, _ = step_skill(state, action)
            assert outcome.success, f"{action.surface_form} failed"
        assert check_success(state, spraybottle_task)


def test_replan_rejects_success_and_detects_no_progress(bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    plan = oracle_search(bathroom, spraybottle_task)
    with pytest.raises(ValueError):
        replan(ctx, plan, FeedbackLine("ok", "ok"), PlannerBackend())
    play(ctx, ["go to sinkbasin 1"])
    backend = wire_backend(["Replanned Action Sequence:\n" + plan.serialize()])
    with pytest.raises(NoProgressError):
        replan(ctx, plan, FeedbackLine("[Plan exhausted]", EXHAUSTED_CODE), backend)


def test_parse_plan_with_rationale():
    text = (
        "> think: First I need to find a spraybottle.\n"
        "> step 1: go to cabinet 1\n"
        "> step 2: go to cabinet 2\n"
        "Replanned Action Sequence:\n"
        "> think: I need to open cabinet 2.\n"
        "> step 1: open cabinet 2\n"
    )
    plan = parse_plan(text, "Replanned Action Sequence:")
    assert forms(plan) == ["open cabinet 2"]
    assert plan.rationale == ("First I need to find a spraybottle.", "I need to open cabinet 2.")
    with pytest.raises(PlanParseError):
        parse_plan("I am not sure what to do.")
    with pytest.raises(PlanParseError):
        parse_plan("> step 1: juggle the spraybottle")


def test_wire_propose_and_replan_transcript(bathroom, spraybottle_task):
    """The wire replan prompt carries the failed plan and the question scaffold."""
    initial = "\n".join(f"> step {i}: {s}" for i, s in enumerate(FLAWED_PLAN, 1))
    replanned = (
        "> think: I need to change the action sequence. I need to open cabinet 2.\n"
        "Replanned Action Sequence:\n"
        + "\n".join(f"> step {i}: {s}" for i, s in enumerate(EXPECTED_PLAN, 1))
    )
    backend = wire_backend([initial, replanned])
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    plan = propose_plan(ctx, backend)
    assert forms(plan) == FLAWED_PLAN
    failure = play(ctx, FLAWED_PLAN[:3])
    new = replan(ctx, plan, failure, backend)
    assert forms(new) == EXPECTED_PLAN
    assert new.offset == 2
    prompt = backend.model.prompts[1]
    assert "> think: step 3 is failed to execute. cabinet 2 is closed." in prompt
    assert prompt.rstrip().endswith("Replanned Action Sequence:")
    assert_golden("spraybottle_replan_prompt.txt", transcript_header() + "\n" + prompt)


def test_wire_retries_unparseable_responses(bathroom, spraybottle_task):
    backend = wire_backend(["no idea", "still no idea", "> step 1: go to cabinet 1"])
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    assert forms(propose_plan(ctx, backend)) == ["go to cabinet 1"]
    assert backend.model.call_count == 3

    backend = wire_backend(["no idea"])
    with pytest.raises(PlanParseError):
        propose_plan(ctx, backend)
    assert backend.model.call_count == 3, "one call plus max_retries re-asks"


def test_corrected_action(bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    play(ctx, FLAWED_PLAN[:2])
    assert corrected_action(ctx, 2, PlannerBackend()).surface_form == "open cabinet 2"
    backend = wire_backend(["> step 3: open cabinet 2"])
    assert corrected_action(ctx, 2, backend).surface_form == "open cabinet 2"
    assert "What is the next action?" in backend.model.prompts[0]


def test_retrospect_names_earliest_failure(bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    states = []
    state = bathroom
    for line in FLAWED_PLAN[:3] + ["go to toilet 1"]:
        states.append(state)
        state, _, _ = step_skill(state, parse_action(line))
    play(ctx, FLAWED_PLAN[:3] + ["go to toilet 1"])
    tau_v = [VisualStep(render_visual(s), s) for s in states]
    record = retrospect(ctx.text_history, tau_v, PlannerBackend(), task=spraybottle_task, success=False)
    assert record.failed_step.surface_form == "take spraybottle 2 from cabinet 2"
    assert record.diagnosis == "cabinet 2 is closed"
    assert record.corrective_hint == "open cabinet 2 before taking"
    assert record.to_text() == (
        'Failed at "take spraybottle 2 from cabinet 2". Diagnosis: cabinet 2 is closed. '
        "Hint: open cabinet 2 before taking."
    )
    with pytest.raises(ValueError):
        retrospect(ctx.text_history, tau_v[:-1], PlannerBackend(), task=spraybottle_task, success=False)


def test_wire_retrospection(bathroom, spraybottle_task):
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    play(ctx, FLAWED_PLAN[:3])
    tau_v = [VisualStep(render_visual(bathroom), bathroom)] * 3
    backend = wire_backend(["Diagnosis: cabinet 2 was never opened.\nHint: open cabinet 2 first."])
    record = retrospect(ctx.text_history, tau_v, backend, task=spraybottle_task, success=False, trial_index=4)
    assert (record.diagnosis, record.corrective_hint) == ("cabinet 2 was never opened", "open cabinet 2 first")
    assert record.trial_index == 4
    assert "Environment Return. Failure." in backend.model.prompts[0]


def test_feedback_record_consistency():
    with pytest.raises(ValueError):
        FeedbackRecord("t", 0, None, "d", "h", final_success=False)
    with pytest.raises(ValueError):
        FeedbackRecord("t", 0, parse_action("open cabinet 2"), "d", "h", final_success=True)


def test_memory_cap_evicts_oldest_first():
    """Random push sequences never exceed the cap and keep the newest records."""
    rng = np.random.default_rng(0)
    pool = MemoryPool(cap=3)
    pushed = []
    for i in range(10_000):
        success = bool(rng.random() < 0.5)
        record = FeedbackRecord(
            f"task-{i}", i, None if success else parse_action("open cabinet 2"), "d", "h", success,
        )
        pool = push_memory(pool, record)
        pushed.append(record)
        assert len(pool) <= 3
    assert pool.records == tuple(pushed[-3:])
    with pytest.raises(ValueError):
        MemoryPool(tuple(pushed[:4]), cap=3)
