"""
Small autoregressive plan model.

Scores each plan step token with a linear-softmax layer over context
features: task type, the last environment feedback code, the step position
and the previous token. Fine-tuned on expert plans by gradient descent on
the summed negative log-likelihood.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .world import (
    FEEDBACK_CODES,
    OBJECT_KIND_NAMES,
    OBJECT_KINDS,
    RECEPTACLE_KIND_NAMES,
    RECEPTACLE_KINDS,
    TASK_TYPES,
    VERB_FLAG,
    FLAG_REQUIRES,
    SkillAction,
    split_id,
)

logger = logging.getLogger(__name__)

LAST_CODES = (*FEEDBACK_CODES, "plan-exhausted", "none")
_RECEPTACLE_VERBS = ("goto", "open", "close", "put")


class OutOfVocabularyError(ValueError):
    """Raised when a plan step has no token in the model vocabulary."""


def step_token(action: SkillAction) -> str:
    """Template token of an action, e.g. "take:spraybottle" or "goto:cabinet"."""
    if action.verb in _RECEPTACLE_VERBS:
        return f"{action.verb}:{split_id(action.receptacle)[0]}"
    return f"{action.verb}:{split_id(action.object)[0]}"


def default_vocabulary() -> Tuple[str, ...]:
    tokens = set()
    for kind in RECEPTACLE_KIND_NAMES:
        tokens.update({f"goto:{kind}", f"put:{kind}"})
        if RECEPTACLE_KINDS[kind].openable:
            tokens.update({f"open:{kind}", f"close:{kind}"})
    for kind in OBJECT_KIND_NAMES:
        props = OBJECT_KINDS[kind].properties
        if "pickable" in props:
            tokens.add(f"take:{kind}")
        for verb, flag in VERB_FLAG.items():
            if FLAG_REQUIRES[flag] in props:
                tokens.add(f"{verb}:{kind}")
        if "light-source" in props:
            tokens.add(f"use:{kind}")
    return tuple(sorted(tokens))


@dataclass(frozen=True, eq=False)
class PlanModelParams:
    vocabulary: Tuple[str, ...]
    weights: np.ndarray  # (n_features, len(vocabulary))
    horizon: int = 30

    @classmethod
    def zeros(cls, vocabulary: Optional[Sequence[str]] = None, horizon: int = 30) -> "PlanModelParams":
        vocab = tuple(vocabulary) if vocabulary is not None else default_vocabulary()
        return cls(vocab, np.zeros((feature_count(len(vocab), horizon), len(vocab))), horizon)

    def __post_init__(self) -> None:
        expected = (feature_count(len(self.vocabulary), self.horizon), len(self.vocabulary))
        if self.weights.shape != expected:
            raise ValueError(f"Weights have shape {self.weights.shape}, expected {expected}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("Plan model weights must be finite")

    def token_index(self, action: SkillAction) -> int:
        token = step_token(action)
        try:
            return self.vocabulary.index(token)
        except ValueError:
            raise OutOfVocabularyError(f"{action.surface_form!r} maps to unknown token {token!r}") from None

    def save(self, path: Union[str, Path]) -> None:
        np.savez(path, weights=self.weights, vocabulary=np.array(self.vocabulary), horizon=self.horizon)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PlanModelParams":
        with np.load(path) as data:
            return cls(tuple(str(t) for t in data["vocabulary"]), data["weights"], int(data["horizon"]))


def feature_count(vocab_size: int, horizon: int) -> int:
    return len(TASK_TYPES) + len(LAST_CODES) + horizon + vocab_size + 1


def _last_code(ctx) -> str:
    return ctx.text_history[-1].feedback.code if ctx.text_history else "none"


def design_matrix(params: PlanModelParams, plan, ctx) -> Tuple[np.ndarray, np.ndarray]:
    """Feature rows and target token indices for every step of a plan."""
    targets = np.array([params.token_index(s) for s in plan.steps], dtype=int)
    n = len(targets)
    vocab = len(params.vocabulary)
    x = np.zeros((n, feature_count(vocab, params.horizon)))
    x[:, TASK_TYPES.index(ctx.task.task_type)] = 1.0
    code = _last_code(ctx)
    offset = len(TASK_TYPES)
    x[:, offset + LAST_CODES.index(code if code in LAST_CODES else "none")] = 1.0
    offset += len(LAST_CODES)
    positions = np.minimum(np.arange(n), params.horizon - 1)
    x[np.arange(n), offset + positions] = 1.0
    offset += params.horizon
    previous = np.concatenate([[vocab], targets[:-1]])  # index vocab is the start-of-plan token
    x[np.arange(n), offset + previous] = 1.0
    return x, targets


def plan_model_nll(params: PlanModelParams, plan, ctx) -> float:
    """
    Negative log-likelihood of a plan under the model.

    Raises:
        OutOfVocabularyError: if a step has no token in the vocabulary
    """
    x, y = design_matrix(params, plan, ctx)
    logp = log_softmax(x @ params.weights, axis=1)
    return float(-logp[np.arange(len(y)), y].sum())


def plan_model_grad(params: PlanModelParams, plan, ctx) -> Tuple[float, np.ndarray]:
    """NLL of a plan and its gradient with respect to the weights."""
    x, y = design_matrix(params, plan, ctx)
    logits = x @ params.weights
    logp = log_softmax(logits, axis=1)
    residual = softmax(logits, axis=1)
    residual[np.arange(len(y)), y] -= 1.0
    return float(-logp[np.arange(len(y)), y].sum()), x.T @ residual


def corpus_nll(params: PlanModelParams, corpus: Sequence[Tuple[object, object]]) -> float:
    """Mean plan NLL over (context, plan) pairs."""
    return float(np.mean([plan_model_nll(params, plan, ctx) for ctx, plan in corpus]))


def finetune_plan_model(
    params: PlanModelParams,
    corpus: Sequence[Tuple[object, object]],
    epochs: int,
    lr: float,
    history: Optional[List[float]] = None,
) -> PlanModelParams:
    """
    Full-batch gradient descent on the mean plan NLL.

    Args:
        params: Starting parameters (not modified)
        corpus: (PlanContext, Plan) pairs
        epochs: Number of descent steps
        lr: Learning rate
        history: Optional list receiving the loss before each step

    Returns:
        Updated parameters
    """
    if not corpus:
        raise ValueError("Cannot fine-tune on an empty corpus")
    # design matrices do not depend on the weights
    batches = [design_matrix(params, plan, ctx) for ctx, plan in corpus]
    weights = params.weights.copy()
    for epoch in range(epochs):
        grad = np.zeros_like(weights)
        loss = 0.0
        for x, y in batches:
            logits = x @ weights
            logp = log_softmax(logits, axis=1)
            residual = np.exp(logp)
            residual[np.arange(len(y)), y] -= 1.0
            loss -= logp[np.arange(len(y)), y].sum()
            grad += x.T @ residual
        if history is not None:
            history.append(loss / len(batches))
        weights -= lr * grad / len(batches)
    logger.debug("Plan model fine-tuned for %d epochs on %d plans", epochs, len(corpus))
    return replace(params, weights=weights)
