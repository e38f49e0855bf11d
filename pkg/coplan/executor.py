"""
Executor policy.

A linear-softmax policy over candidate skill actions. Visual features come
from an egocentric window of the raster; logits are tied per action
template ("open:cabinet", "take:mug", ...) and combined with a few
agreement features between each candidate and the planner's current
instruction. Trained by behaviour cloning into a frozen reference, then by
DPO against that reference.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from .plan_model import default_vocabulary, step_token
from .planner import oracle_search
from .world import (
    BASE_CODE_COUNT,
    CONTENT_CODE_COUNT,
    OBJECT_KIND_NAMES,
    RECEPTACLE_KIND_NAMES,
    TASK_TYPES,
    SkillAction,
    TaskSpec,
    VisualObs,
    WorldState,
    check_success,
    code_kind,
    render_visual,
    split_id,
    step_skill,
    valid_actions,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
AGREEMENT_FEATURES = ("exact", "verb", "receptacle", "task-object", "task-destination")


class SchemaMismatchError(ValueError):
    """Raised when a checkpoint was written under a different feature schema."""


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExecutorContext:
    """What the executor knows besides the raster."""

    agent_pos: Tuple[int, int]
    facing_kind: Optional[str] = None
    holding: bool = False
    receptacle_cells: Tuple[Tuple[str, Tuple[int, int]], ...] = ()
    instruction: Optional[SkillAction] = None

    @classmethod
    def from_state(cls, state: WorldState, instruction: Optional[SkillAction] = None) -> "ExecutorContext":
        facing = state.facing
        return cls(
            agent_pos=state.agent_pos,
            facing_kind=facing.kind if facing else None,
            holding=bool(state.inventory),
            receptacle_cells=tuple((r.id, r.grid_pos) for r in state.receptacles),
            instruction=instruction,
        )


@dataclass(frozen=True, eq=False)
class Features:
    vector: np.ndarray
    instruction: Optional[SkillAction]
    grounded: bool  # the instruction's receptacle shows its own kind in the raster
    object_kind: str
    destination_kind: Optional[str]


def feature_dim(window: int = 5) -> int:
    cells = window * window
    raster = cells * (BASE_CODE_COUNT + 1) + cells * (CONTENT_CODE_COUNT + 1)
    return raster + len(TASK_TYPES) + 1 + len(RECEPTACLE_KIND_NAMES) + 1


def _window(channel: np.ndarray, pos: Tuple[int, int], window: int, fill: int) -> np.ndarray:
    half = window // 2
    padded = np.pad(channel, half, constant_values=fill)
    r, c = pos
    return padded[r:r + window, c:c + window]


def _grounded(obs: VisualObs, ctx: ExecutorContext) -> bool:
    if ctx.instruction is None:
        return False
    rid = ctx.instruction.receptacle
    if rid is None:
        return True
    cells = dict(ctx.receptacle_cells)
    if rid not in cells:
        return False
    r, c = cells[rid]
    return code_kind(int(obs.grid[0, r, c])) == split_id(rid)[0]


def featurize(obs: VisualObs, task: TaskSpec, ctx: ExecutorContext, window: int = 5) -> Features:
    """
    Feature vector of an observation: one-hot window of the receptacle and
    content channels around the agent (out-of-grid cells get their own
    code), task type, inventory bit and faced receptacle kind.
    """
    if window % 2 != 1:
        raise ValueError(f"Window must be odd, got {window}")
    base = _window(obs.grid[0], ctx.agent_pos, window, BASE_CODE_COUNT)
    content = _window(obs.grid[1], ctx.agent_pos, window, CONTENT_CODE_COUNT)
    task_bits = np.zeros(len(TASK_TYPES))
    task_bits[TASK_TYPES.index(task.task_type)] = 1.0
    facing = np.zeros(len(RECEPTACLE_KIND_NAMES) + 1)
    facing[RECEPTACLE_KIND_NAMES.index(ctx.facing_kind) if ctx.facing_kind else -1] = 1.0
    vector = np.concatenate([
        np.eye(BASE_CODE_COUNT + 1)[base].ravel(),
        np.eye(CONTENT_CODE_COUNT + 1)[content].ravel(),
        task_bits,
        [1.0 if ctx.holding else 0.0],
        facing,
    ])
    goal = task.goal_predicate
    return Features(vector, ctx.instruction, _grounded(obs, ctx), goal.object_kind, goal.destination_kind)


def agreement_features(features: Features, candidate: SkillAction) -> np.ndarray:
    """Agreement between a candidate and the instruction and task, one entry per AGREEMENT_FEATURES."""
    out = np.zeros(len(AGREEMENT_FEATURES))
    b = features.instruction
    if b is not None:
        out[0] = float(features.grounded and candidate == b)
        out[1] = float(features.grounded and candidate.verb == b.verb)
        out[2] = float(
            features.grounded and b.receptacle is not None and candidate.receptacle == b.receptacle
        )
    obj = candidate.object
    out[3] = float(obj is not None and split_id(obj)[0] == features.object_kind)
    rid = candidate.receptacle
    out[4] = float(
        features.destination_kind is not None and rid is not None and split_id(rid)[0] == features.destination_kind
    )
    return out


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray  # (feature dim, templates + 1); last column is the unknown template
    bias: np.ndarray  # (templates + 1,)
    agreement: np.ndarray  # (len(AGREEMENT_FEATURES),)
    vocabulary: Tuple[str, ...] = field(default_factory=default_vocabulary)

    @classmethod
    def zeros(cls, window: int = 5, vocabulary: Optional[Sequence[str]] = None) -> "PolicyParams":
        vocab = tuple(vocabulary) if vocabulary is not None else default_vocabulary()
        return cls(
            np.zeros((feature_dim(window), len(vocab) + 1)),
            np.zeros(len(vocab) + 1),
            np.zeros(len(AGREEMENT_FEATURES)),
            vocab,
        )

    def __post_init__(self) -> None:
        for name in ("weights", "bias", "agreement"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"Policy {name} must be finite")

    @cached_property
    def _token_index(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(self.vocabulary)}

    def template(self, action: SkillAction) -> int:
        try:
            token = step_token(action)
        except (TypeError, ValueError):
            return len(self.vocabulary)
        return self._token_index.get(token, len(self.vocabulary))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias, self.agreement])

    def unflat(self, vector: np.ndarray) -> "PolicyParams":
        nw = self.weights.size
        nb = self.bias.size
        return replace(
            self,
            weights=vector[:nw].reshape(self.weights.shape),
            bias=vector[nw:nw + nb],
            agreement=vector[nw + nb:],
        )

    def step(self, grad: "PolicyParams", lr: float) -> "PolicyParams":
        return replace(
            self,
            weights=self.weights - lr * grad.weights,
            bias=self.bias - lr * grad.bias,
            agreement=self.agreement - lr * grad.agreement,
        )


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    actions: Tuple[SkillAction, ...]
    probs: np.ndarray

    def prob(self, action: SkillAction) -> float:
        return float(self.probs[self.actions.index(action)])

    def argmax(self) -> SkillAction:
        return self.actions[int(np.argmax(self.probs))]

    def sample(self, rng: np.random.Generator) -> SkillAction:
        return self.actions[int(rng.choice(len(self.actions), p=self.probs))]


def _logits(params: PolicyParams, features: Features, candidates: Sequence[SkillAction]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    templates = np.array([params.template(c) for c in candidates], dtype=int)
    psi = np.stack([agreement_features(features, c) for c in candidates])
    logits = features.vector @ params.weights[:, templates] + params.bias[templates] + psi @ params.agreement
    return logits, templates, psi


def policy_dist(
    params: PolicyParams,
    features: Features,
    candidates: Sequence[SkillAction],
    temperature: float = 1.0,
) -> ActionDistribution:
    """
    Softmax over candidate logits; non-candidates are simply absent.

    Raises:
        ValueError: on an empty candidate list or non-positive temperature
    """
    if not candidates:
        raise ValueError("policy_dist needs at least one candidate")
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    logits, _, _ = _logits(params, features, candidates)
    return ActionDistribution(tuple(candidates), softmax(logits / temperature))


def _logit_grad(
    params: PolicyParams, features: Features, templates: np.ndarray, psi: np.ndarray, g: np.ndarray
) -> PolicyParams:
    """Backpropagate a gradient over candidate logits into the parameters."""
    per_template = np.zeros(params.bias.shape)
    np.add.at(per_template, templates, g)
    weights = np.zeros_like(params.weights)
    touched = np.nonzero(per_template)[0]
    weights[:, touched] = np.outer(features.vector, per_template[touched])
    return replace(params, weights=weights, bias=per_template, agreement=psi.T @ g)


# ---------------------------------------------------------------------------
# Preference pairs and losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PreferencePair:
    task: TaskSpec
    obs: VisualObs
    executed: SkillAction
    expert: SkillAction
    candidates: Tuple[SkillAction, ...]
    context: ExecutorContext
    window: int = 5

    def __post_init__(self) -> None:
        if self.executed not in self.candidates or self.expert not in self.candidates:
            raise ValueError("Executed and expert actions must both be candidates")

    @property
    def degenerate(self) -> bool:
        return self.executed == self.expert

    @cached_property
    def features(self) -> Features:
        return featurize(self.obs, self.task, self.context, self.window)


def _log_probs(params: PolicyParams, pair: PreferencePair) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    logits, templates, psi = _logits(params, pair.features, pair.candidates)
    return log_softmax(logits), templates, psi


def _margin(theta: PolicyParams, ref: PolicyParams, pair: PreferencePair) -> float:
    lt, _, _ = _log_probs(theta, pair)
    lr, _, _ = _log_probs(ref, pair)
    e = pair.candidates.index(pair.expert)
    x = pair.candidates.index(pair.executed)
    return float((lt[e] - lr[e]) - (lt[x] - lr[x]))


def dpo_loss(theta: PolicyParams, ref: PolicyParams, pair: PreferencePair, beta: float) -> float:
    """
    -log sigmoid(beta * margin), where the margin is the expert's log-ratio
    against the reference minus the executed action's.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return float(-log_expit(beta * _margin(theta, ref, pair)))


def dpo_grad(theta: PolicyParams, ref: PolicyParams, batch: Sequence[PreferencePair], beta: float) -> PolicyParams:
    """Mean gradient of dpo_loss over a batch, with respect to theta."""
    if not batch:
        raise ValueError("dpo_grad needs a non-empty batch")
    total = theta.flat() * 0.0
    for pair in batch:
        coef = -beta * expit(-beta * _margin(theta, ref, pair))
        _, templates, psi = _log_probs(theta, pair)
        # the softmax terms of both log-probabilities cancel
        g = np.zeros(len(pair.candidates))
        g[pair.candidates.index(pair.expert)] += coef
        g[pair.candidates.index(pair.executed)] -= coef
        total += _logit_grad(theta, pair.features, templates, psi, g).flat()
    return theta.unflat(total / len(batch))


def ce_loss(theta: PolicyParams, pair: PreferencePair) -> float:
    """-log pi_theta(expert | s), the cross-entropy ablation loss."""
    logp, _, _ = _log_probs(theta, pair)
    return float(-logp[pair.candidates.index(pair.expert)])


def ce_grad(theta: PolicyParams, batch: Sequence[PreferencePair]) -> PolicyParams:
    if not batch:
        raise ValueError("ce_grad needs a non-empty batch")
    total = theta.flat() * 0.0
    for pair in batch:
        logp, templates, psi = _log_probs(theta, pair)
        g = np.exp(logp)
        g[pair.candidates.index(pair.expert)] -= 1.0
        total += _logit_grad(theta, pair.features, templates, psi, g).flat()
    return theta.unflat(total / len(batch))


def kl_divergence(
    theta: PolicyParams, ref: PolicyParams, features: Features, candidates: Sequence[SkillAction]
) -> float:
    """KL(pi_theta || pi_ref) over a candidate set."""
    p = policy_dist(theta, features, candidates).probs
    q = policy_dist(ref, features, candidates).probs
    return float(np.sum(p * (np.log(p) - np.log(q))))


# ---------------------------------------------------------------------------
# Behaviour cloning
# ---------------------------------------------------------------------------

Demo = Tuple[Features, Tuple[SkillAction, ...], SkillAction]


def bc_pretrain(
    demos: Sequence[Demo],
    epochs: int,
    lr: float,
    window: int = 5,
    vocabulary: Optional[Sequence[str]] = None,
) -> PolicyParams:
    """
    Cross-entropy behaviour cloning from zero parameters, full batch.

    Args:
        demos: (features, candidates, expert action) triples
        epochs: Gradient steps; zero returns the uniform policy
        lr: Learning rate

    Returns:
        Reference policy parameters
    """
    if not demos:
        raise ValueError("bc_pretrain needs at least one demonstration")
    params = PolicyParams.zeros(window, vocabulary)
    prepared = []
    for features, candidates, expert in demos:
        if expert not in candidates:
            raise ValueError(f"Expert action {expert} is not among the candidates")
        templates = np.array([params.template(c) for c in candidates], dtype=int)
        psi = np.stack([agreement_features(features, c) for c in candidates])
        prepared.append((features, templates, psi, list(candidates).index(expert)))
    for epoch in range(epochs):
        total = params.flat() * 0.0
        loss = 0.0
        for features, templates, psi, e in prepared:
            logits = features.vector @ params.weights[:, templates] + params.bias[templates] + psi @ params.agreement
            logp = log_softmax(logits)
            loss -= logp[e]
            g = np.exp(logp)
            g[e] -= 1.0
            total += _logit_grad(params, features, templates, psi, g).flat()
        params = params.step(params.unflat(total / len(prepared)), lr)
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.debug(f"BC epoch {epoch}: mean loss {loss / len(prepared):.4f}")
    return params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def schema_hash(window: int = 5, vocabulary: Optional[Sequence[str]] = None) -> str:
    """Digest of everything that fixes the meaning of a parameter entry."""
    schema = {
        "receptacles": RECEPTACLE_KIND_NAMES,
        "objects": OBJECT_KIND_NAMES,
        "tasks": TASK_TYPES,
        "window": window,
        "vocabulary": list(vocabulary) if vocabulary is not None else list(default_vocabulary()),
        "agreement": AGREEMENT_FEATURES,
    }
    return hashlib.sha256(json.dumps(schema, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(params: PolicyParams, path: Union[str, Path], window: int = 5, **metadata: Any) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "schema_hash": schema_hash(window, params.vocabulary),
        "window": window,
        "vocabulary": list(params.vocabulary),
        **metadata,
    }
    np.savez(path, weights=params.weights, bias=params.bias, agreement=params.agreement, meta=json.dumps(meta))


def load_checkpoint(
    path: Union[str, Path], window: int = 5, vocabulary: Optional[Sequence[str]] = None
) -> Tuple[PolicyParams, Dict[str, Any]]:
    """
    Load policy parameters and their metadata.

    The stored hash is checked against the schema of the running code
    (the default vocabulary unless one is given, and feature_dim(window)),
    never against one rebuilt from the file's own metadata.

    Raises:
        SchemaMismatchError: if the checkpoint's schema hash, vocabulary or
            weight shape differs from the current one
    """
    vocab = tuple(vocabulary) if vocabulary is not None else default_vocabulary()
    expected = schema_hash(window, vocab)
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("schema_hash") != expected or meta.get("version") != CHECKPOINT_VERSION:
            raise SchemaMismatchError(
                f"Checkpoint {path} has schema {meta.get('schema_hash')} (v{meta.get('version')}), "
                f"current is {expected} (v{CHECKPOINT_VERSION})"
            )
        if tuple(meta.get("vocabulary", ())) != vocab:
            raise SchemaMismatchError(f"Checkpoint {path} was saved with a different step vocabulary")
        shape = (feature_dim(window), len(vocab) + 1)
        if data["weights"].shape != shape:
            raise SchemaMismatchError(f"Checkpoint {path} has weights {data['weights'].shape}, expected {shape}")
        params = PolicyParams(data["weights"], data["bias"], data["agreement"], vocab)
    return params, meta


def collect_demos(
    episodes: Sequence[Tuple[WorldState, TaskSpec]], window: int = 5
) -> List[Demo]:
    """
    Demonstrations from oracle rollouts, with the oracle's step as the
    instruction at every state. A failed step (a stuck receptacle) is
    followed by a fresh oracle plan from the resulting state.
    """
    demos: List[Demo] = []
    for world, task in episodes:
        state = world
        while not check_success(state, task) and state.step_count < state.horizon:
            for action in oracle_search(state, task).steps:
                ctx = ExecutorContext.from_state(state, instruction=action)
                candidates = list(valid_actions(state))
                if action not in candidates:
                    candidates.append(action)
                demos.append((featurize(render_visual(state), task, ctx, window), tuple(candidates), action))
                state, outcome, _ = step_skill(state, action)
                if not outcome.success or check_success(state, task) or state.step_count >= state.horizon:
                    break
    return demos
