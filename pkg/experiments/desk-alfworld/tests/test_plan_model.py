"""
Tests for the plan-step language model.

This module tests:
1. Step tokens and the vocabulary
2. The negative log-likelihood and its analytic gradient
3. Fine-tuning on a plan corpus and npz persistence
"""

import numpy as np
import pytest

from coplan.plan_model import (
    LAST_CODES,
    OutOfVocabularyError,
    PlanModelParams,
    corpus_nll,
    default_vocabulary,
    feature_count,
    finetune_plan_model,
    plan_model_grad,
    plan_model_nll,
    step_token,
)
from coplan.planner import Plan, PlanContext, TextStep, oracle_search
from coplan.translator import FeedbackLine, translate_state
from coplan.world import TASK_TYPES, SkillAction, parse_action


def test_step_tokens():
    assert step_token(parse_action("go to cabinet 2")) == "goto:cabinet"
    assert step_token(parse_action("take spraybottle 2 from cabinet 2")) == "take:spraybottle"
    assert step_token(parse_action("put spraybottle 2 in/on toilet 1")) == "put:toilet"
    assert step_token(parse_action("heat mug 1 with microwave 1")) == "heat:mug"
    vocab = default_vocabulary()
    assert list(vocab) == sorted(vocab)
    for token in ("open:cabinet", "use:desklamp", "cool:lettuce", "clean:cloth"):
        assert token in vocab, f"{token} missing from the vocabulary"
    assert "open:toilet" not in vocab, "toilets cannot be opened"
    assert "heat:cloth" not in vocab, "cloths are not heatable"


def test_uniform_model_nll(bathroom, spraybottle_task):
    """Zero weights give every step probability 1 / |V|."""
    params = PlanModelParams.zeros()
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    plan = oracle_search(bathroom, spraybottle_task)
    expected = len(plan.steps) * np.log(len(params.vocabulary))
    assert plan_model_nll(params, plan, ctx) == pytest.approx(expected, rel=1e-12)


def test_small_vocabulary_nll(bathroom, spraybottle_task):
    vocab = ["goto:cabinet", "goto:toilet", "open:cabinet", "put:toilet", "take:spraybottle",
             "goto:sinkbasin", "take:soapbar", "close:cabinet"]
    params = PlanModelParams.zeros(vocab)
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    plan = Plan((parse_action("go to cabinet 1"),))
    assert plan_model_nll(params, plan, ctx) == pytest.approx(np.log(8), abs=1e-12)
    with pytest.raises(OutOfVocabularyError):
        plan_model_nll(params, Plan((parse_action("go to countertop 1"),)), ctx)


def test_plan_model_gradient_matches_finite_differences(bathroom, spraybottle_task):
    """Analytic gradient agrees with central differences at random weights."""
    rng = np.random.default_rng(0)
    vocab = ["goto:cabinet", "goto:toilet", "open:cabinet", "put:toilet", "take:spraybottle"]
    base = PlanModelParams.zeros(vocab, horizon=8)
    plan = oracle_search(bathroom, spraybottle_task)
    obs = translate_state(bathroom)
    contexts = [
        PlanContext(spraybottle_task, obs, world=bathroom),
        PlanContext(spraybottle_task, obs, world=bathroom, text_history=[
            TextStep(obs, SkillAction("goto", ("cabinet 2",)), FeedbackLine("[Action failed] cabinet 2.", "closed-receptacle")),
        ]),
    ]
    h = 1e-5
    for trial in range(10):
        weights = rng.normal(scale=0.5, size=base.weights.shape)
        params = PlanModelParams(base.vocabulary, weights, base.horizon)
        ctx = contexts[trial % 2]
        nll, grad = plan_model_grad(params, plan, ctx)
        assert nll == pytest.approx(plan_model_nll(params, plan, ctx), rel=1e-12)
        numeric = np.zeros_like(weights)
        for idx in zip(*np.nonzero(np.ones_like(weights))):
            bump = np.zeros_like(weights)
            bump[idx] = h
            up = plan_model_nll(PlanModelParams(base.vocabulary, weights + bump, base.horizon), plan, ctx)
            down = plan_model_nll(PlanModelParams(base.vocabulary, weights - bump, base.horizon), plan, ctx)
            numeric[idx] = (up - down) / (2 * h)
        err = np.max(np.abs(grad - numeric)) / max(1.0, np.max(np.abs(numeric)))
        assert err < 1e-5, f"relative gradient error {err:.2e} on trial {trial}"


def test_finetune_reduces_corpus_nll(bathroom, spraybottle_task):
    params = PlanModelParams.zeros()
    ctx = PlanContext(spraybottle_task, translate_state(bathroom), world=bathroom)
    corpus = [(ctx, oracle_search(bathroom, spraybottle_task))]
    history = []
    tuned = finetune_plan_model(params, corpus, epochs=40, lr=0.1, history=history)
    assert corpus_nll(tuned, corpus) < corpus_nll(params, corpus)
    assert history[0] == pytest.approx(corpus_nll(params, corpus))
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:])), "full-batch descent should not go up"
    assert np.all(params.weights == 0), "the input parameters are left untouched"
    with pytest.raises(ValueError):
        finetune_plan_model(params, [], epochs=1, lr=0.1)


def test_save_and_load(tmp_path):
    rng = np.random.default_rng(1)
    params = PlanModelParams.zeros()
    params = PlanModelParams(params.vocabulary, rng.normal(size=params.weights.shape), params.horizon)
    path = tmp_path / "plan_model.npz"
    params.save(path)
    loaded = PlanModelParams.load(path)
    assert loaded.vocabulary == params.vocabulary
    assert np.array_equal(loaded.weights, params.weights)
    assert loaded.weights.shape == (feature_count(len(params.vocabulary), 30), len(params.vocabulary))
    assert feature_count(len(params.vocabulary), 30) == len(TASK_TYPES) + len(LAST_CODES) + 30 + len(params.vocabulary) + 1


def test_rejects_bad_weights():
    params = PlanModelParams.zeros(["goto:cabinet"], horizon=4)
    with pytest.raises(ValueError):
        PlanModelParams(params.vocabulary, np.zeros((3, 1)), 4)
    bad = params.weights.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        PlanModelParams(params.vocabulary, bad, 4)
