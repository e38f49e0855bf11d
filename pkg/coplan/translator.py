"""
Textual twin of the household world.

Turns world states into structured text observations, step outcomes into
environment feedback lines, and assembles the planner prompt. Also injects
token noise for the robustness experiments.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .world import (
    OBJECT_KIND_NAMES,
    RECEPTACLE_KIND_NAMES,
    RECEPTACLE_KINDS,
    SkillAction,
    StepOutcome,
    WorldState,
    listing_order,
    split_id,
)

logger = logging.getLogger(__name__)

PROMPT_FORMAT_VERSION = 1
FAILED = "[Action failed]"
ROOM_PREFIX = "You are in the middle of a room. Looking quickly around you, you see "
N_DISTRACTORS = 64
MAX_ENTITY_INDEX = 20


@dataclass(frozen=True)
class TextObs:
    room_description: str
    observed_objects: Tuple[str, ...] = ()
    observed_relations: Tuple[str, ...] = ()
    inventory: Tuple[str, ...] = ()
    location: str = "the middle of the room"


@dataclass(frozen=True)
class FeedbackLine:
    text: str
    code: str


@dataclass(frozen=True)
class PromptBundle:
    environment_text: str
    instruction_text: str
    history: Tuple[Tuple[str, FeedbackLine], ...] = ()
    memory_texts: Tuple[str, ...] = ()
    memory_cap: int = 3

    def __post_init__(self) -> None:
        if len(self.memory_texts) > self.memory_cap:
            raise ValueError(
                f"{len(self.memory_texts)} memory records exceed the cap of {self.memory_cap}"
            )


def _with_article(items: Iterable[str]) -> List[str]:
    return [f"a {item}" for item in items]


def _oxford_join(items: List[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def describe_room(state: WorldState) -> str:
    """Room sentence listing receptacles, kinds alphabetical and indices descending."""
    ids = sorted((r.id for r in state.receptacles), key=lambda rid: (split_id(rid)[0], -split_id(rid)[1]))
    return ROOM_PREFIX + _oxford_join(_with_article(ids)) + "."


def translate_state(state: WorldState) -> TextObs:
    """
    Translate a world state into its textual observation.

    Closed receptacles report their state but none of their contents, the
    same occlusion the raster applies.
    """
    objects: List[str] = []
    relations: List[str] = []
    for rid in listing_order(state):
        recep = state.receptacle(rid)
        if recep.openable:
            relations.append(f"{rid} is {'open' if recep.is_open else 'closed'}")
        if not recep.accessible:
            continue
        relation = RECEPTACLE_KINDS[recep.kind].relation
        for oid in recep.contents:
            objects.append(oid)
            relations.append(f"{oid} is {relation} {rid}")
    relations.extend(f"agent is carrying {oid}" for oid in state.inventory)
    location = state.agent_facing or "the middle of the room"
    return TextObs(
        room_description=describe_room(state),
        observed_objects=tuple(objects),
        observed_relations=tuple(relations),
        inventory=tuple(state.inventory),
        location=location,
    )


def render_inventory(obs: TextObs) -> str:
    if not obs.inventory:
        return "You are carrying nothing."
    return f"You are carrying: {', '.join(_with_article(obs.inventory))}."


def describe(obs: TextObs) -> str:
    """Multi-line rendering of a text observation."""
    if obs.location == "the middle of the room":
        where = "You are in the middle of the room."
    else:
        where = f"You are at {obs.location}."
    seen = ", ".join(_with_article(obs.observed_objects)) if obs.observed_objects else "nothing"
    lines = [obs.room_description, where, f"You see {seen}."]
    lines.extend(f"{r}." for r in obs.observed_relations)
    lines.append(render_inventory(obs))
    return "\n".join(lines)


def _contents_phrase(contents: Tuple[str, ...]) -> str:
    return ", ".join(_with_article(contents))


def translate_outcome(outcome: StepOutcome, action: SkillAction, state: WorldState) -> FeedbackLine:
    """
    Render a step outcome as an environment feedback line.

    Args:
        outcome: Outcome returned by step_skill
        action: The action that was executed
        state: World state after the step

    Returns:
        FeedbackLine; failures start with "[Action failed]"
    """
    code = outcome.feedback_code
    rid = action.receptacle
    oid = action.object
    if code == "ok":
        return FeedbackLine(_success_text(outcome, action, state), code)
    if code == "closed-receptacle":
        text = f"{FAILED} {outcome.observed_delta.get('receptacle', rid)}."
    elif code == "stuck":
        text = f"{FAILED} {rid} is stuck."
    elif code == "not-here":
        text = f"{FAILED} you are not at {outcome.observed_delta.get('receptacle') or rid}."
    elif code == "hands-full":
        text = f"{FAILED} you are already carrying {outcome.observed_delta.get('holding')}."
    elif code == "not-found":
        if action.verb == "take":
            text = f"{FAILED} {oid} is not in {rid}."
        else:
            text = f"{FAILED} you are not carrying {oid}."
    else:
        text = f"{FAILED} {action.surface_form} is not possible."
    return FeedbackLine(text, code)


def _success_text(outcome: StepOutcome, action: SkillAction, state: WorldState) -> str:
    verb = action.verb
    rid = action.receptacle
    oid = action.object
    if verb == "goto":
        recep = state.receptacle(rid)
        if not recep.accessible:
            return f"The {rid} is closed."
        if not recep.contents:
            return f"On the {rid}, there is nothing."
        return f"On the {rid}, there is {_contents_phrase(recep.contents)}."
    if verb == "open":
        recep = state.receptacle(rid)
        if not recep.contents:
            return f"The {rid} is open. It is empty."
        return f"The {rid} is open. In it, you see {_contents_phrase(recep.contents)}."
    if verb == "close":
        return f"You close the {rid}."
    if verb == "take":
        return f"You pick up the {oid} from the {rid}."
    if verb == "put":
        return f"You put the {oid} in/on the {rid}."
    if verb == "use":
        return f"You turn {'on' if outcome.observed_delta.get('lit') else 'off'} the {oid}."
    return f"You {verb} the {oid} using the {rid}."


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

_TEMPLATE_SENTENCES = (
    ROOM_PREFIX,
    "You are in the middle of the room. You are at You see nothing. You are carrying nothing.",
    "You are carrying: is in on open closed agent carrying",
    "On the there is nothing. The is closed. The is open. It is empty. In it, you see",
    "You close the You pick up the from the You put the in/on the You turn on off the",
    "You heat cool clean the using the",
)


@lru_cache(maxsize=1)
def noise_vocabulary() -> Tuple[str, ...]:
    """
    Replacement tokens: every surface token the templates can produce over
    the catalogs, plus fixed distractor tokens.
    """
    tokens = set()
    for sentence in _TEMPLATE_SENTENCES:
        tokens.update(sentence.split())
    for kind in (*RECEPTACLE_KIND_NAMES, *OBJECT_KIND_NAMES):
        tokens.add(kind)
    for i in range(1, MAX_ENTITY_INDEX + 1):
        tokens.update({str(i), f"{i},", f"{i}."})
    tokens.update(f"distractor{i:02d}" for i in range(N_DISTRACTORS))
    return tuple(sorted(tokens))


def _noisy_text(text: str, rate: float, rng: np.random.Generator, vocab: Tuple[str, ...], index: dict) -> str:
    out = []
    for token in text.split():
        if rng.random() >= rate:
            out.append(token)
            continue
        own = index.get(token)
        if own is None:
            out.append(vocab[int(rng.integers(len(vocab)))])
        else:
            j = int(rng.integers(len(vocab) - 1))
            out.append(vocab[j + 1 if j >= own else j])
    return " ".join(out)


def apply_text_noise(obs: TextObs, rate: float, seed: int, vocabulary: Optional[Tuple[str, ...]] = None) -> TextObs:
    """
    Replace each whitespace token with a different vocabulary token with
    probability rate. Fields are processed in declaration order.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"Noise rate must be in [0, 1], got {rate}")
    if rate == 0.0:
        return obs
    vocab = vocabulary or noise_vocabulary()
    index = {tok: i for i, tok in enumerate(vocab)}
    rng = np.random.default_rng(seed)

    def noisy(text: str) -> str:
        return _noisy_text(text, rate, rng, vocab, index)

    return replace(
        obs,
        room_description=noisy(obs.room_description),
        observed_objects=tuple(noisy(t) for t in obs.observed_objects),
        observed_relations=tuple(noisy(t) for t in obs.observed_relations),
        inventory=tuple(noisy(t) for t in obs.inventory),
        location=noisy(obs.location),
    )


# ---------------------------------------------------------------------------
# Prompt
# ---------------------------------------------------------------------------

def transcript_header() -> str:
    return f"# prompt-format: {PROMPT_FORMAT_VERSION}"


def format_step(index: int, action: str) -> str:
    return f"> step {index}: {action}"


def build_prompt(bundle: PromptBundle) -> str:
    """
    Assemble the planner prompt.

    Sections, in order: memory block (only when non-empty), environment,
    task instruction, then the step/feedback history.
    """
    lines: List[str] = []
    if bundle.memory_texts:
        lines.append("Your memory for the task below:")
        for i, text in enumerate(bundle.memory_texts):
            lines.append(f"Trial {i}:")
            lines.append(text)
    lines.append(f"Environment: {bundle.environment_text}")
    lines.append(f"Your task is to: {bundle.instruction_text}.")
    for k, (action, feedback) in enumerate(bundle.history, start=1):
        lines.append(format_step(k, action))
        lines.append(f"Env. feedback: {feedback.text}")
    return "\n".join(lines) + "\n"
