"""
Coplan: planner/executor co-adaptation in a grid household

This package provides a seeded grid-world household simulator with a
parallel textual world, a planner (exact search oracle or a wire language
model) that plans, replans and retrospects, a linear visual executor
trained by preference optimization against the planner's corrections, and
a harness for training, evaluation, noise sweeps and ablations.
"""

__version__ = "0.1.0"
__author__ = "Coplan Team"

from .api import (
    SuiteSpec,
    TaskRef,
    ablate,
    evaluate_checkpoint,
    load_suite,
    planner_error_table,
    read_suite,
    suite_refs,
    sweep_checkpoint,
    train,
    write_suite,
)
from .config import ConfigError, load_config
from .evaluation import EvalReport, evaluate, sweep, validate_eval_report
from .executor import (
    PolicyParams,
    PreferencePair,
    SchemaMismatchError,
    bc_pretrain,
    dpo_grad,
    dpo_loss,
    featurize,
    load_checkpoint,
    policy_dist,
    save_checkpoint,
)
from .models import BaseLLM, CompletionModel, ScriptedModel, create_model_from_config
from .plan_model import PlanModelParams, finetune_plan_model, plan_model_nll
from .planner import (
    MemoryPool,
    Plan,
    PlannerBackend,
    corrected_action,
    corrected_plan,
    next_step,
    oracle_search,
    propose_plan,
    push_memory,
    replan,
    retrospect,
)
from .trainer import (
    TrainerConfig,
    TrialReport,
    aggregate,
    count_planner_errors,
    run_episode,
    run_training,
    train_policy,
)
from .translator import apply_text_noise, build_prompt, translate_outcome, translate_state
from .world import (
    TASK_TYPES,
    SkillAction,
    TaskSpec,
    WorldState,
    apply_visual_noise,
    check_success,
    generate_task,
    render_visual,
    step_skill,
)

__all__ = [
    "SuiteSpec",
    "TaskRef",
    "ablate",
    "evaluate_checkpoint",
    "load_suite",
    "planner_error_table",
    "read_suite",
    "suite_refs",
    "sweep_checkpoint",
    "train",
    "write_suite",
    "ConfigError",
    "load_config",
    "EvalReport",
    "evaluate",
    "sweep",
    "validate_eval_report",
    "PolicyParams",
    "PreferencePair",
    "SchemaMismatchError",
    "bc_pretrain",
    "dpo_grad",
    "dpo_loss",
    "featurize",
    "load_checkpoint",
    "policy_dist",
    "save_checkpoint",
    "BaseLLM",
    "CompletionModel",
    "ScriptedModel",
    "create_model_from_config",
    "PlanModelParams",
    "finetune_plan_model",
    "plan_model_nll",
    "MemoryPool",
    "Plan",
    "PlannerBackend",
    "corrected_action",
    "corrected_plan",
    "next_step",
    "oracle_search",
    "propose_plan",
    "push_memory",
    "replan",
    "retrospect",
    "TrainerConfig",
    "TrialReport",
    "aggregate",
    "count_planner_errors",
    "run_episode",
    "run_training",
    "train_policy",
    "apply_text_noise",
    "build_prompt",
    "translate_outcome",
    "translate_state",
    "TASK_TYPES",
    "SkillAction",
    "TaskSpec",
    "WorldState",
    "apply_visual_noise",
    "check_success",
    "generate_task",
    "render_visual",
    "step_skill",
]
