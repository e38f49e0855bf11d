"""
Miniature household world.

Procedurally generated rooms of receptacles and objects on a small grid,
a skill-level action interface whose actions expand into micro actions,
success predicates for the six task families, a symbolic raster standing
in for the camera image, and a rectangle-crop noise injector for it.

All values are frozen snapshots; step_skill returns a new WorldState.
"""

import hashlib
import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

TASK_TYPES = ("Pick&Place", "Clean&Place", "Heat&Place", "Cool&Place", "Look", "Pick2&Place")
TASK_SLUGS = {
    "Pick&Place": "pick",
    "Clean&Place": "clean",
    "Heat&Place": "heat",
    "Cool&Place": "cool",
    "Look": "look",
    "Pick2&Place": "pick2",
}
VERBS = ("goto", "open", "close", "take", "put", "heat", "cool", "clean", "use")
MICRO_ACTIONS = (
    "move-north", "move-south", "move-east", "move-west",
    "actuate-open", "actuate-close", "grasp", "release", "toggle",
)
FEEDBACK_CODES = ("ok", "closed-receptacle", "not-here", "hands-full", "not-found", "invalid", "stuck")
OBJECT_PROPERTIES = ("heatable", "coolable", "cleanable", "pickable", "elongated", "light-source")
STATE_FLAGS = ("hot", "cold", "clean", "lit")

# BFS expansion order for goto: N, S, E, W
DIRECTIONS = (
    ("move-north", (-1, 0)),
    ("move-south", (1, 0)),
    ("move-east", (0, 1)),
    ("move-west", (0, -1)),
)

# flag -> property that makes it reachable
FLAG_REQUIRES = {"hot": "heatable", "cold": "coolable", "clean": "cleanable", "lit": "light-source"}
VERB_FLAG = {"heat": "hot", "cool": "cold", "clean": "clean"}
FLAG_VERB = {flag: verb for verb, flag in VERB_FLAG.items()}
TASK_FLAG = {"Heat&Place": "hot", "Cool&Place": "cold", "Clean&Place": "clean"}


class GenerationError(RuntimeError):
    """Raised when no solvable layout is found within the attempt budget."""


class EpisodeExhaustedError(RuntimeError):
    """Raised when stepping a world whose step budget is used up."""


class ActionParseError(ValueError):
    """Raised when a string is not a well-formed skill action."""


# ---------------------------------------------------------------------------
# Catalogs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReceptacleKind:
    name: str
    openable: bool = False
    appliance: Optional[str] = None  # state flag this receptacle applies
    placeable: bool = True  # may be a task destination
    relation: str = "on"


@dataclass(frozen=True)
class ObjectKind:
    name: str
    properties: FrozenSet[str]
    likely: Tuple[str, ...]  # receptacle kinds it is usually found in


def _okind(name: str, props: str, likely: str) -> ObjectKind:
    return ObjectKind(name, frozenset(props.split()), tuple(likely.split()))


RECEPTACLE_KINDS: Dict[str, ReceptacleKind] = {
    k.name: k
    for k in (
        ReceptacleKind("cabinet", openable=True, relation="in"),
        ReceptacleKind("countertop"),
        ReceptacleKind("desk"),
        ReceptacleKind("diningtable"),
        ReceptacleKind("drawer", openable=True, relation="in"),
        ReceptacleKind("fridge", openable=True, appliance="cold", relation="in"),
        ReceptacleKind("garbagecan", relation="in"),
        ReceptacleKind("handtowelholder", placeable=False),
        ReceptacleKind("microwave", openable=True, appliance="hot", placeable=False, relation="in"),
        ReceptacleKind("safe", openable=True, relation="in"),
        ReceptacleKind("shelf"),
        ReceptacleKind("sidetable"),
        ReceptacleKind("sinkbasin", appliance="clean", placeable=False, relation="in"),
        ReceptacleKind("toilet"),
        ReceptacleKind("toiletpaperhanger", placeable=False),
        ReceptacleKind("towelholder", placeable=False),
    )
}

OBJECT_KINDS: Dict[str, ObjectKind] = {
    k.name: k
    for k in (
        _okind("alarmclock", "pickable", "desk sidetable shelf"),
        _okind("apple", "pickable heatable coolable cleanable", "countertop diningtable fridge garbagecan"),
        _okind("book", "pickable", "desk shelf sidetable diningtable drawer"),
        _okind("bowl", "pickable heatable coolable cleanable", "cabinet countertop diningtable shelf"),
        _okind("bread", "pickable heatable coolable", "countertop diningtable fridge"),
        _okind("candle", "pickable", "cabinet countertop toilet shelf"),
        _okind("cd", "pickable", "desk drawer shelf safe sidetable"),
        _okind("cellphone", "pickable", "desk sidetable drawer shelf"),
        _okind("cloth", "pickable cleanable", "cabinet countertop sinkbasin towelholder drawer"),
        _okind("creditcard", "pickable", "drawer desk sidetable safe shelf"),
        _okind("cup", "pickable heatable coolable cleanable", "cabinet countertop diningtable sinkbasin shelf"),
        _okind("desklamp", "light-source", "desk sidetable"),
        _okind("egg", "pickable heatable coolable", "fridge countertop diningtable"),
        _okind("handtowel", "pickable", "handtowelholder cabinet countertop"),
        _okind("keychain", "pickable", "drawer safe sidetable shelf desk"),
        _okind("lettuce", "pickable coolable cleanable", "fridge countertop diningtable"),
        _okind("mug", "pickable heatable coolable cleanable", "cabinet countertop diningtable shelf sinkbasin"),
        _okind("pan", "pickable coolable cleanable", "countertop cabinet sinkbasin"),
        _okind("pen", "pickable elongated", "desk drawer sidetable shelf"),
        _okind("pencil", "pickable elongated", "desk drawer sidetable shelf"),
        _okind("plate", "pickable heatable coolable cleanable", "cabinet countertop diningtable shelf"),
        _okind("potato", "pickable heatable coolable cleanable", "fridge countertop diningtable"),
        _okind("remotecontrol", "pickable", "sidetable diningtable drawer shelf"),
        _okind("soapbar", "pickable cleanable", "sinkbasin countertop cabinet toilet"),
        _okind("soapbottle", "pickable", "cabinet countertop toilet shelf"),
        _okind("spraybottle", "pickable", "cabinet countertop toilet sinkbasin garbagecan"),
        _okind("statue", "pickable", "shelf sidetable desk diningtable"),
        _okind("toiletpaper", "pickable", "toiletpaperhanger cabinet toilet countertop"),
        _okind("tomato", "pickable heatable coolable cleanable", "fridge countertop diningtable sinkbasin"),
        _okind("towel", "pickable", "towelholder cabinet"),
        _okind("vase", "pickable", "shelf sidetable diningtable cabinet"),
    )
}

RECEPTACLE_KIND_NAMES = tuple(sorted(RECEPTACLE_KINDS))
OBJECT_KIND_NAMES = tuple(sorted(OBJECT_KINDS))

ARCHETYPES: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "bathroom": (
        ("cabinet", "countertop", "drawer", "garbagecan", "handtowelholder", "shelf",
         "sinkbasin", "toilet", "toiletpaperhanger", "towelholder"),
        ("candle", "cloth", "handtowel", "soapbar", "soapbottle", "spraybottle", "toiletpaper", "towel"),
    ),
    "bedroom": (
        ("cabinet", "desk", "drawer", "garbagecan", "safe", "shelf", "sidetable"),
        ("alarmclock", "book", "cd", "cellphone", "creditcard", "keychain", "pen", "pencil", "statue", "vase"),
    ),
    "kitchen": (
        ("cabinet", "countertop", "diningtable", "drawer", "fridge", "garbagecan", "microwave",
         "shelf", "sinkbasin"),
        ("apple", "bowl", "bread", "cup", "egg", "lettuce", "mug", "pan", "plate", "potato",
         "soapbottle", "spraybottle", "tomato"),
    ),
    "livingroom": (
        ("cabinet", "diningtable", "drawer", "garbagecan", "safe", "shelf", "sidetable"),
        ("book", "cellphone", "creditcard", "keychain", "remotecontrol", "statue", "vase"),
    ),
}

# ---------------------------------------------------------------------------
# Raster code table
# ---------------------------------------------------------------------------
# channel 0: floor, or receptacle kind x {closed, open}
# channel 1: topmost visible content kind, 0 when nothing visible
# channel 2: agent, 0 none, 1 empty-handed, 2+j holding object kind j

FLOOR_CODE = 0
BASE_CODE_COUNT = 1 + 2 * len(RECEPTACLE_KIND_NAMES)
CONTENT_CODE_COUNT = 1 + len(OBJECT_KIND_NAMES)
AGENT_CODE_COUNT = 2 + len(OBJECT_KIND_NAMES)
CHANNEL_SIZES = (BASE_CODE_COUNT, CONTENT_CODE_COUNT, AGENT_CODE_COUNT)


def receptacle_code(kind: str, is_open: bool) -> int:
    i = RECEPTACLE_KIND_NAMES.index(kind)
    return 2 + 2 * i if is_open else 1 + 2 * i


def content_code(kind: str) -> int:
    return 1 + OBJECT_KIND_NAMES.index(kind)


def code_kind(code: int) -> Optional[str]:
    """Receptacle kind encoded by a base-channel code (None for floor)."""
    if code <= FLOOR_CODE or code >= BASE_CODE_COUNT:
        return None
    return RECEPTACLE_KIND_NAMES[(code - 1) // 2]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def split_id(entity_id: str) -> Tuple[str, int]:
    """Split "cabinet 2" into ("cabinet", 2)."""
    kind, _, index = entity_id.rpartition(" ")
    return kind, int(index)


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    kind: str
    properties: FrozenSet[str]
    state_flags: FrozenSet[str] = frozenset()

    @property
    def pickable(self) -> bool:
        return "pickable" in self.properties


@dataclass(frozen=True)
class ReceptacleSpec:
    id: str
    kind: str
    openable: bool
    is_open: bool
    contents: Tuple[str, ...]
    grid_pos: Tuple[int, int]
    stuck: bool = False

    @property
    def accessible(self) -> bool:
        """Contents can be seen and reached."""
        return self.is_open or not self.openable


@dataclass(frozen=True)
class Goal:
    object_kind: str
    destination_kind: Optional[str]
    required_flags: FrozenSet[str] = frozenset()
    count: int = 1
    light_kind: Optional[str] = None

    @property
    def appliance_kind(self) -> Optional[str]:
        for flag in self.required_flags:
            for kind in RECEPTACLE_KIND_NAMES:
                if RECEPTACLE_KINDS[kind].appliance == flag:
                    return kind
        return None


def task_id_for(task_type: str, seed: int, ood: bool = False, stuck: bool = False) -> str:
    """Stable id such as "pick-seen-3" or "clean-ood-1000002-stuck"."""
    split = "ood" if ood else "seen"
    suffix = "-stuck" if stuck else ""
    return f"{TASK_SLUGS[task_type]}-{split}-{seed}{suffix}"


@dataclass(frozen=True)
class TaskSpec:
    task_type: str
    instruction: str
    goal_predicate: Goal
    seed: int
    ood: bool = False
    stuck: bool = False

    @property
    def task_id(self) -> str:
        return task_id_for(self.task_type, self.seed, self.ood, self.stuck)


@dataclass(frozen=True)
class SkillAction:
    verb: str
    args: Tuple[str, ...]

    @property
    def surface_form(self) -> str:
        a = self.args
        if self.verb == "goto":
            return f"go to {a[0]}"
        if self.verb in ("open", "close", "use"):
            return f"{self.verb} {a[0]}"
        if self.verb == "take":
            return f"take {a[0]} from {a[1]}"
        if self.verb == "put":
            return f"put {a[0]} in/on {a[1]}"
        if self.verb in VERB_FLAG:
            return f"{self.verb} {a[0]} with {a[1]}"
        return self.verb

    @property
    def receptacle(self) -> Optional[str]:
        """Receptacle argument, if the verb names one."""
        if self.verb in ("goto", "open", "close"):
            return self.args[0]
        if self.verb in ("take", "put", "heat", "cool", "clean"):
            return self.args[1]
        return None

    @property
    def object(self) -> Optional[str]:
        if self.verb in ("take", "put", "heat", "cool", "clean", "use"):
            return self.args[0]
        return None

    def __str__(self) -> str:
        return self.surface_form


@dataclass(frozen=True)
class StepOutcome:
    success: bool
    feedback_code: str
    observed_delta: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class WorldState:
    grid_dims: Tuple[int, int]
    receptacles: Tuple[ReceptacleSpec, ...]
    objects: Tuple[ObjectSpec, ...]
    agent_pos: Tuple[int, int]
    agent_facing: Optional[str] = None
    inventory: Tuple[str, ...] = ()
    step_count: int = 0
    rng_seed: int = 0
    horizon: int = 30
    observed: FrozenSet[str] = frozenset()

    @cached_property
    def _receptacle_index(self) -> Dict[str, int]:
        return {r.id: i for i, r in enumerate(self.receptacles)}

    @cached_property
    def _object_index(self) -> Dict[str, ObjectSpec]:
        return {o.id: o for o in self.objects}

    @cached_property
    def _locations(self) -> Dict[str, str]:
        where = {oid: r.id for r in self.receptacles for oid in r.contents}
        where.update({oid: "inventory" for oid in self.inventory})
        return where

    def has_receptacle(self, rid: str) -> bool:
        return rid in self._receptacle_index

    def has_object(self, oid: str) -> bool:
        return oid in self._object_index

    def receptacle(self, rid: str) -> ReceptacleSpec:
        return self.receptacles[self._receptacle_index[rid]]

    def get_object(self, oid: str) -> ObjectSpec:
        return self._object_index[oid]

    def location_of(self, oid: str) -> Optional[str]:
        """Receptacle id holding the object, "inventory", or None."""
        return self._locations.get(oid)

    @property
    def facing(self) -> Optional[ReceptacleSpec]:
        return self.receptacle(self.agent_facing) if self.agent_facing else None

    @property
    def held(self) -> Optional[str]:
        return self.inventory[0] if self.inventory else None

    def key(self) -> tuple:
        """Hashable identity of the physical state, ignoring the step counter."""
        return (self.agent_pos, self.agent_facing, self.inventory, self.receptacles,
                self.objects, self.observed)

    def with_receptacle(self, updated: ReceptacleSpec) -> "WorldState":
        recs = list(self.receptacles)
        recs[self._receptacle_index[updated.id]] = updated
        return replace(self, receptacles=tuple(recs))

    def with_object(self, updated: ObjectSpec) -> "WorldState":
        objs = tuple(updated if o.id == updated.id else o for o in self.objects)
        return replace(self, objects=objs)


@dataclass(frozen=True, eq=False)
class VisualObs:
    """Symbolic raster: array of shape (3, rows, cols), one channel per code table."""

    grid: np.ndarray

    @property
    def dims(self) -> Tuple[int, int]:
        return int(self.grid.shape[1]), int(self.grid.shape[2])

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.grid, dtype=np.int16).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class WorldParams:
    grid_rows: int = 7
    grid_cols: int = 7
    min_receptacles: int = 6
    max_receptacles: int = 12
    min_objects: int = 8
    max_objects: int = 20
    horizon: int = 30
    max_plan_steps: int = 22
    max_attempts: int = 1000

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]]) -> "WorldParams":
        if not config:
            return cls()
        section = config.get("world", config)
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# Action grammar
# ---------------------------------------------------------------------------

_ENTITY = r"([a-z]+ \d+)"
_ACTION_PATTERNS = (
    (re.compile(rf"^(?:go to|goto) {_ENTITY}$"), "goto"),
    (re.compile(rf"^(open|close|use) {_ENTITY}$"), None),
    (re.compile(rf"^take {_ENTITY} from {_ENTITY}$"), "take"),
    (re.compile(rf"^put {_ENTITY} (?:in/on|in|on) {_ENTITY}$"), "put"),
    (re.compile(rf"^(heat|cool|clean) {_ENTITY} with {_ENTITY}$"), None),
)


def parse_action(text: str) -> SkillAction:
    """
    Parse a surface form such as "take spraybottle 2 from cabinet 2".

    Raises:
        ActionParseError: if the text matches no action template
    """
    normal = " ".join(text.strip().lower().split()).rstrip(".")
    for pattern, verb in _ACTION_PATTERNS:
        m = pattern.match(normal)
        if m is None:
            continue
        groups = m.groups()
        if verb is None:
            return SkillAction(groups[0], tuple(groups[1:]))
        return SkillAction(verb, tuple(groups))
    raise ActionParseError(f"Not a skill action: {text!r}")


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def grid_path(dims: Tuple[int, int], start: Tuple[int, int], goal: Tuple[int, int]) -> List[str]:
    """Shortest move sequence between two cells, ties broken N, S, E, W."""
    if start == goal:
        return []
    rows, cols = dims
    parent: Dict[Tuple[int, int], Tuple[Tuple[int, int], str]] = {}
    queue = deque([start])
    seen = {start}
    while queue:
        cell = queue.popleft()
        for move, (dr, dc) in DIRECTIONS:
            nxt = (cell[0] + dr, cell[1] + dc)
            if not (0 <= nxt[0] < rows and 0 <= nxt[1] < cols) or nxt in seen:
                continue
            seen.add(nxt)
            parent[nxt] = (cell, move)
            if nxt == goal:
                moves = []
                while nxt != start:
                    nxt, mv = parent[nxt]
                    moves.append(mv)
                return moves[::-1]
            queue.append(nxt)
    raise ValueError(f"No path from {start} to {goal} on grid {dims}")


def _fail(code: str, **delta: Any) -> StepOutcome:
    return StepOutcome(False, code, delta)


def transition(
    state: WorldState,
    action: SkillAction,
    honor_stuck: bool = True,
) -> Tuple[WorldState, StepOutcome, List[str]]:
    """
    Apply one skill action without touching the step counter.

    With honor_stuck=False stuck receptacles open on the first attempt;
    the planner's search uses that mode since it cannot know about them.
    """
    verb = action.verb
    args = action.args
    if verb not in VERBS:
        return state, _fail("invalid", reason=f"unknown verb {verb}"), []
    rid = action.receptacle

    if rid is not None and not state.has_receptacle(rid):
        return state, _fail("invalid", reason=f"no receptacle {rid}"), []
    oid = action.object
    if oid is not None and not state.has_object(oid):
        return state, _fail("invalid", reason=f"no object {oid}"), []

    if verb == "goto":
        target = state.receptacle(rid)
        moves = grid_path(state.grid_dims, state.agent_pos, target.grid_pos)
        observed = state.observed | {rid} if target.accessible else state.observed
        new = replace(state, agent_pos=target.grid_pos, agent_facing=rid, observed=observed)
        visible = list(target.contents) if target.accessible else None
        return new, StepOutcome(True, "ok", {"arrived": rid, "visible": visible}), moves

    if verb == "use":
        lamp = state.get_object(oid)
        if "light-source" not in lamp.properties:
            return state, _fail("invalid", reason=f"{oid} is not a light"), []
        if state.location_of(oid) != state.agent_facing or state.agent_facing is None:
            return state, _fail("not-here", receptacle=state.location_of(oid)), []
        if not state.receptacle(state.agent_facing).accessible:
            return state, _fail("closed-receptacle", receptacle=state.agent_facing), []
        lit = "lit" not in lamp.state_flags
        flags = lamp.state_flags | {"lit"} if lit else lamp.state_flags - {"lit"}
        new = state.with_object(replace(lamp, state_flags=flags))
        return new, StepOutcome(True, "ok", {"lamp": oid, "lit": lit}), ["toggle"]

    recep = state.receptacle(rid)
    if verb in ("open", "close") and not recep.openable:
        return state, _fail("invalid", reason=f"{rid} cannot be {verb}ed"), []
    if state.agent_facing != rid:
        return state, _fail("not-here", receptacle=rid), []

    if verb == "open":
        if recep.is_open:
            return state, _fail("invalid", reason=f"{rid} is already open"), []
        if recep.stuck and honor_stuck:
            # the jam gives on the first pull; the next attempt succeeds
            new = state.with_receptacle(replace(recep, stuck=False))
            return new, _fail("stuck", receptacle=rid), []
        new = state.with_receptacle(replace(recep, is_open=True, stuck=False))
        new = replace(new, observed=new.observed | {rid})
        return new, StepOutcome(True, "ok", {"opened": rid, "revealed": list(recep.contents)}), ["actuate-open"]

    if verb == "close":
        if not recep.is_open:
            return state, _fail("invalid", reason=f"{rid} is already closed"), []
        new = state.with_receptacle(replace(recep, is_open=False))
        return new, StepOutcome(True, "ok", {"closed": rid}), ["actuate-close"]

    if verb == "take":
        if not recep.accessible:
            return state, _fail("closed-receptacle", receptacle=rid), []
        if oid not in recep.contents:
            return state, _fail("not-found", object=oid, receptacle=rid), []
        if state.inventory:
            return state, _fail("hands-full", holding=state.inventory[0]), []
        if not state.get_object(oid).pickable:
            return state, _fail("invalid", reason=f"{oid} cannot be picked up"), []
        contents = tuple(c for c in recep.contents if c != oid)
        new = state.with_receptacle(replace(recep, contents=contents))
        new = replace(new, inventory=(oid,))
        return new, StepOutcome(True, "ok", {"taken": oid, "source": rid}), ["grasp"]

    if verb == "put":
        if not recep.accessible:
            return state, _fail("closed-receptacle", receptacle=rid), []
        if oid not in state.inventory:
            return state, _fail("not-found", object=oid, receptacle="inventory"), []
        new = state.with_receptacle(replace(recep, contents=(*recep.contents, oid)))
        new = replace(new, inventory=())
        return new, StepOutcome(True, "ok", {"placed": oid, "target": rid}), ["release"]

    # heat / cool / clean
    flag = VERB_FLAG[verb]
    if RECEPTACLE_KINDS[recep.kind].appliance != flag:
        return state, _fail("invalid", reason=f"cannot {verb} with {rid}"), []
    if oid not in state.inventory:
        return state, _fail("not-found", object=oid, receptacle="inventory"), []
    obj = state.get_object(oid)
    if FLAG_REQUIRES[flag] not in obj.properties:
        return state, _fail("invalid", reason=f"{oid} is not {FLAG_REQUIRES[flag]}"), []
    opposite = {"hot": "cold", "cold": "hot"}.get(flag)
    flags = (obj.state_flags - {opposite}) | {flag} if opposite else obj.state_flags | {flag}
    new = state.with_object(replace(obj, state_flags=frozenset(flags)))
    return new, StepOutcome(True, "ok", {"changed": oid, "flag": flag, "appliance": rid}), ["toggle"]


def step_skill(state: WorldState, action: SkillAction) -> Tuple[WorldState, StepOutcome, List[str]]:
    """
    Execute one skill action and advance the step counter.

    Args:
        state: Current world snapshot
        action: Skill action to execute

    Returns:
        (next state, outcome, executed micro actions). Failed actions are
        atomic: the world is unchanged apart from the step counter. The one
        exception is a stuck open, which fails but clears the receptacle's
        stuck flag so that the next open succeeds.

    Raises:
        EpisodeExhaustedError: if the step budget is already used up
    """
    if state.step_count >= state.horizon:
        raise EpisodeExhaustedError(f"Step budget of {state.horizon} exhausted")
    new, outcome, micro = transition(state, action)
    if not outcome.success and outcome.feedback_code != "stuck":
        new = state
    return replace(new, step_count=state.step_count + 1), outcome, micro


def listing_order(state: WorldState) -> List[str]:
    """Receptacle ids, kinds alphabetical and indices ascending."""
    return sorted((r.id for r in state.receptacles), key=split_id)


def valid_actions(state: WorldState) -> List[SkillAction]:
    """
    Enumerate the syntactically applicable skill actions in a state.

    Goto actions for every receptacle come first in listing order, then the
    actions available at the faced receptacle.
    """
    actions = [SkillAction("goto", (rid,)) for rid in listing_order(state)]
    recep = state.facing
    if recep is None:
        return actions
    held = state.held
    if recep.openable:
        actions.append(SkillAction("close" if recep.is_open else "open", (recep.id,)))
    if recep.accessible and held is None:
        actions.extend(
            SkillAction("take", (oid, recep.id))
            for oid in recep.contents
            if state.get_object(oid).pickable
        )
    if held is not None:
        actions.append(SkillAction("put", (held, recep.id)))
        flag = RECEPTACLE_KINDS[recep.kind].appliance
        verb = FLAG_VERB.get(flag) if flag else None
        if verb and FLAG_REQUIRES[flag] in state.get_object(held).properties:
            actions.append(SkillAction(verb, (held, recep.id)))
    if recep.accessible:
        actions.extend(
            SkillAction("use", (oid,))
            for oid in recep.contents
            if "light-source" in state.get_object(oid).properties
        )
    return actions


def check_success(state: WorldState, task: TaskSpec) -> bool:
    """True iff the task's goal predicate holds in the state."""
    goal = task.goal_predicate
    if task.task_type == "Look":
        if not any(state.get_object(o).kind == goal.object_kind for o in state.inventory):
            return False
        recep = state.facing
        if recep is None or not recep.accessible:
            return False
        return any(
            "light-source" in state.get_object(o).properties and "lit" in state.get_object(o).state_flags
            for o in recep.contents
        )
    placed = 0
    for recep in state.receptacles:
        if recep.kind != goal.destination_kind:
            continue
        for oid in recep.contents:
            obj = state.get_object(oid)
            if obj.kind == goal.object_kind and goal.required_flags <= obj.state_flags:
                placed += 1
    return placed >= goal.count


# ---------------------------------------------------------------------------
# Raster
# ---------------------------------------------------------------------------

def render_visual(state: WorldState) -> VisualObs:
    """
    Render the symbolic raster of a state.

    Closed receptacles show their kind code and nothing of their contents;
    accessible ones show their topmost content in the content channel.
    """
    rows, cols = state.grid_dims
    grid = np.zeros((3, rows, cols), dtype=np.int16)
    for recep in state.receptacles:
        r, c = recep.grid_pos
        grid[0, r, c] = receptacle_code(recep.kind, recep.accessible)
        if recep.accessible and recep.contents:
            grid[1, r, c] = content_code(state.get_object(recep.contents[-1]).kind)
    held = state.held
    r, c = state.agent_pos
    grid[2, r, c] = 1 if held is None else 2 + OBJECT_KIND_NAMES.index(state.get_object(held).kind)
    grid.flags.writeable = False
    return VisualObs(grid)


def apply_visual_noise(obs: VisualObs, rate: float, seed: int) -> VisualObs:
    """
    Overwrite a random axis-aligned rectangle covering about rate of the
    cells with uniformly random codes of each channel's table.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"Noise rate must be in [0, 1], got {rate}")
    if rate == 0.0:
        return obs
    rng = np.random.default_rng(seed)
    rows, cols = obs.dims
    height = int(np.clip(round(rows * np.sqrt(rate)), 1, rows))
    width = int(np.clip(round(rate * rows * cols / height), 1, cols))
    r0 = int(rng.integers(0, rows - height + 1))
    c0 = int(rng.integers(0, cols - width + 1))
    grid = np.array(obs.grid, copy=True)
    for channel, size in enumerate(CHANNEL_SIZES):
        grid[channel, r0:r0 + height, c0:c0 + width] = rng.integers(0, size, size=(height, width))
    grid.flags.writeable = False
    return VisualObs(grid)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def render_instruction(task_type: str, goal: Goal) -> str:
    o, r = goal.object_kind, goal.destination_kind
    if task_type == "Pick&Place":
        return f"put some {o} on {r}"
    if task_type == "Clean&Place":
        return f"put a clean {o} in {r}"
    if task_type == "Heat&Place":
        return f"heat some {o} and put it in {r}"
    if task_type == "Cool&Place":
        return f"cool some {o} and put it in {r}"
    if task_type == "Look":
        return f"look at {o} under the {goal.light_kind}"
    if task_type == "Pick2&Place":
        return f"find two {o} and put them in {r}"
    raise ValueError(f"Unknown task type: {task_type}")


def _compatible_archetypes(task_type: str) -> List[str]:
    names = []
    for name, (rkinds, okinds) in sorted(ARCHETYPES.items()):
        flag = TASK_FLAG.get(task_type)
        if flag is not None:
            appliance = next(k for k in RECEPTACLE_KIND_NAMES if RECEPTACLE_KINDS[k].appliance == flag)
            if appliance not in rkinds:
                continue
            if not any(FLAG_REQUIRES[flag] in OBJECT_KINDS[o].properties for o in okinds):
                continue
        if task_type == "Look" and not ({"desk", "sidetable"} & set(rkinds)):
            continue
        names.append(name)
    return names


def _draw_world(
    rng: np.random.Generator,
    task_type: str,
    ood: bool,
    stuck: bool,
    seed: int,
    params: WorldParams,
) -> Optional[Tuple[WorldState, TaskSpec]]:
    archetype = rng.choice(_compatible_archetypes(task_type))
    rkinds, okinds = ARCHETYPES[str(archetype)]
    flag = TASK_FLAG.get(task_type)

    targets = [
        o for o in okinds
        if "pickable" in OBJECT_KINDS[o].properties
        and (flag is None or FLAG_REQUIRES[flag] in OBJECT_KINDS[o].properties)
    ]
    target_kind = str(rng.choice(targets))

    required: List[str] = []
    destination: Optional[str] = None
    light: Optional[str] = None
    if flag is not None:
        required.append(next(k for k in rkinds if RECEPTACLE_KINDS[k].appliance == flag))
    if task_type == "Look":
        light = "desklamp"
        required.append(str(rng.choice([k for k in rkinds if k in ("desk", "sidetable")])))
    else:
        dests = [k for k in rkinds if RECEPTACLE_KINDS[k].placeable and RECEPTACLE_KINDS[k].appliance is None]
        destination = str(rng.choice(dests))
        required.append(destination)

    n_recep = int(rng.integers(params.min_receptacles, params.max_receptacles + 1))
    kinds = list(required)
    while len(kinds) < n_recep:
        kinds.append(str(rng.choice(rkinds)))

    rows, cols = params.grid_rows, params.grid_cols
    centre = (rows // 2, cols // 2)
    if ood:
        cells = [(r, c) for r in range(rows) for c in range(cols) if (r, c) != centre]
    else:
        cells = [(r, c) for r in range(rows) for c in range(cols)
                 if r in (0, rows - 1) or c in (0, cols - 1)]
    if len(cells) < n_recep:
        return None
    picks = rng.choice(len(cells), size=n_recep, replace=False)
    placed = sorted(zip(kinds, (cells[int(i)] for i in picks)), key=lambda kc: (kc[0], kc[1]))

    counters: Dict[str, int] = {}
    receptacles: List[Dict[str, Any]] = []
    for kind, pos in placed:
        counters[kind] = counters.get(kind, 0) + 1
        spec = RECEPTACLE_KINDS[kind]
        receptacles.append({
            "id": f"{kind} {counters[kind]}",
            "kind": kind,
            "openable": spec.openable,
            "is_open": spec.openable and bool(rng.random() < 0.2),
            "contents": [],
            "grid_pos": pos,
        })

    n_obj = int(rng.integers(params.min_objects, params.max_objects + 1))
    count = 2 if task_type == "Pick2&Place" else 1
    object_kinds = [target_kind] * count
    if not stuck and rng.random() < 0.3:
        object_kinds.append(target_kind)
    if light is not None:
        object_kinds.append(light)
    fillers = [o for o in okinds if o != target_kind]
    while len(object_kinds) < n_obj:
        object_kinds.append(str(rng.choice(fillers)))

    p_likely = 0.4 if ood else 0.85
    obj_counters: Dict[str, int] = {}
    objects: List[ObjectSpec] = []
    for kind in object_kinds:
        obj_counters[kind] = obj_counters.get(kind, 0) + 1
        oid = f"{kind} {obj_counters[kind]}"
        okind = OBJECT_KINDS[kind]
        objects.append(ObjectSpec(oid, kind, okind.properties))
        if kind == light:
            hosts = [r for r in receptacles if r["kind"] in ("desk", "sidetable")]
        elif kind == target_kind and destination is not None:
            hosts = [r for r in receptacles if r["kind"] != destination]
        else:
            hosts = list(receptacles)
        if not hosts:
            return None
        likely = [r for r in hosts if r["kind"] in okind.likely]
        pool = likely if likely and rng.random() < p_likely else hosts
        host = pool[int(rng.integers(len(pool)))]
        host["contents"].append(oid)

    if stuck:
        target_id = f"{target_kind} 1"
        source = next(r for r in receptacles if target_id in r["contents"])
        if not source["openable"]:
            options = [r for r in receptacles if r["openable"] and r["kind"] != destination]
            if not options:
                return None
            source["contents"].remove(target_id)
            source = options[int(rng.integers(len(options)))]
            source["contents"].append(target_id)
        source["is_open"] = False
        source["stuck"] = True

    world = WorldState(
        grid_dims=(rows, cols),
        receptacles=tuple(
            ReceptacleSpec(
                id=r["id"], kind=r["kind"], openable=r["openable"], is_open=r["is_open"],
                contents=tuple(r["contents"]), grid_pos=r["grid_pos"], stuck=r.get("stuck", False),
            )
            for r in receptacles
        ),
        objects=tuple(objects),
        agent_pos=centre,
        rng_seed=seed,
        horizon=params.horizon,
    )
    goal = Goal(
        object_kind=target_kind,
        destination_kind=destination,
        required_flags=frozenset({flag}) if flag else frozenset(),
        count=count,
        light_kind=light,
    )
    task = TaskSpec(task_type, render_instruction(task_type, goal), goal, seed, ood, stuck)
    return world, task


def validate_world(state: WorldState) -> None:
    """Raise ValueError if a state breaks a structural invariant."""
    rows, cols = state.grid_dims
    ids = [o.id for o in state.objects]
    if len(set(ids)) != len(ids):
        raise ValueError("Object ids are not unique")
    placed = [oid for r in state.receptacles for oid in r.contents] + list(state.inventory)
    if len(placed) != len(set(placed)):
        raise ValueError("An object is in two places at once")
    if set(placed) - set(ids):
        raise ValueError(f"Unknown objects placed: {sorted(set(placed) - set(ids))}")
    if len(state.inventory) > 1:
        raise ValueError("Inventory holds more than one object")
    for r in state.receptacles:
        if r.is_open and not r.openable:
            raise ValueError(f"{r.id} is open but not openable")
        if not (0 <= r.grid_pos[0] < rows and 0 <= r.grid_pos[1] < cols):
            raise ValueError(f"{r.id} lies outside the grid")
    if not (0 <= state.agent_pos[0] < rows and 0 <= state.agent_pos[1] < cols):
        raise ValueError("Agent lies outside the grid")
    for o in state.objects:
        for flag in o.state_flags:
            if FLAG_REQUIRES[flag] not in o.properties:
                raise ValueError(f"{o.id} is {flag} without being {FLAG_REQUIRES[flag]}")


def generate_task(
    seed: int,
    task_type: str,
    ood: bool = False,
    stuck: bool = False,
    params: Optional[WorldParams] = None,
) -> Tuple[WorldState, TaskSpec]:
    """
    Generate a solvable world and task deterministically from a seed.

    Args:
        seed: Integer seed; the same (seed, type, ood, stuck) gives the same world
        task_type: One of TASK_TYPES
        ood: Draw from the held-out layout distribution
        stuck: Hide the target in a closed receptacle that resists its first open
        params: World sizing; defaults to WorldParams()

    Returns:
        (initial WorldState, TaskSpec)

    Raises:
        GenerationError: after params.max_attempts layouts without a solvable one
    """
    from .planner import UnsolvableTaskError, faithful_execution, oracle_search

    if task_type not in TASK_TYPES:
        raise ValueError(f"Unknown task type {task_type!r}; choose from {TASK_TYPES}")
    params = params or WorldParams()
    rng = np.random.default_rng([seed, TASK_TYPES.index(task_type), int(ood), int(stuck)])
    budget = params.max_plan_steps - (1 if stuck else 0)
    for attempt in range(params.max_attempts):
        drawn = _draw_world(rng, task_type, ood, stuck, seed, params)
        if drawn is None:
            continue
        world, task = drawn
        validate_world(world)
        if check_success(world, task):
            continue
        try:
            plan = oracle_search(world, task)
        except UnsolvableTaskError:
            continue
        if len(plan.steps) > budget or not faithful_execution(world, task, plan):
            continue
        logger.debug("Generated %s after %d attempts (plan length %d)", task.task_id, attempt + 1, len(plan.steps))
        return world, task
    raise GenerationError(
        f"No solvable {task_type} layout for seed {seed} after {params.max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def state_to_dict(state: WorldState) -> Dict[str, Any]:
    return {
        "grid_dims": list(state.grid_dims),
        "receptacles": [
            {"id": r.id, "kind": r.kind, "openable": r.openable, "is_open": r.is_open,
             "contents": list(r.contents), "grid_pos": list(r.grid_pos), "stuck": r.stuck}
            for r in state.receptacles
        ],
        "objects": [
            {"id": o.id, "kind": o.kind, "properties": sorted(o.properties), "state_flags": sorted(o.state_flags)}
            for o in state.objects
        ],
        "agent_pos": list(state.agent_pos),
        "agent_facing": state.agent_facing,
        "inventory": list(state.inventory),
        "step_count": state.step_count,
        "rng_seed": state.rng_seed,
        "horizon": state.horizon,
        "observed": sorted(state.observed),
    }


def state_digest(state: WorldState) -> str:
    payload = json.dumps(state_to_dict(state), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def trajectory_records(start: WorldState, actions: Iterable[SkillAction]) -> List[Dict[str, Any]]:
    """Execute actions from a start state and log one record per step."""
    records = []
    state = start
    for i, action in enumerate(actions):
        state, outcome, _ = step_skill(state, action)
        records.append({
            "step": i,
            "state_hash": state_digest(state),
            "action": action.surface_form,
            "outcome": outcome.feedback_code,
            "raster": render_visual(state).digest(),
        })
    return records


def replay_records(start: WorldState, records: Iterable[Dict[str, Any]]) -> WorldState:
    """
    Replay logged actions, checking every state hash along the way.

    Raises:
        ValueError: if a replayed state diverges from its record
    """
    state = start
    for record in records:
        state, outcome, _ = step_skill(state, parse_action(record["action"]))
        if state_digest(state) != record["state_hash"] or outcome.feedback_code != record["outcome"]:
            raise ValueError(f"Replay diverged at step {record['step']} ({record['action']})")
    return state


def write_records(path: Union[str, Path], records: Iterable[Dict[str, Any]]) -> None:
    with Path(path).open("w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_records(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with Path(path).open() as f:
        return [json.loads(line) for line in f if line.strip()]
