"""
Closed-loop co-training of planner and executor.

Each trial rolls every task of a suite out in the world with the current
executor and planner, turns the episodes into preference pairs and
retrospective memory, takes minibatch DPO (or cross-entropy) steps on the
aggregated dataset and fine-tunes the plan model on all expert plans
collected so far.
"""

import hashlib
import json
import logging
import pickle
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from rich.console import Console
from rich.progress import Progress

from .executor import (
    ExecutorContext,
    PolicyParams,
    PreferencePair,
    bc_pretrain,
    ce_grad,
    ce_loss,
    collect_demos,
    dpo_grad,
    dpo_loss,
    featurize,
    policy_dist,
    save_checkpoint,
)
from .models import WireTimeoutError
from .plan_model import PlanModelParams, corpus_nll, finetune_plan_model
from .planner import (
    EXHAUSTED_CODE,
    PLAN_EXHAUSTED,
    MemoryPool,
    NoProgressError,
    Plan,
    PlanContext,
    PlannerBackend,
    PlannerErrorLog,
    PlanParseError,
    TextStep,
    UnsolvableTaskError,
    VisualStep,
    corrected_action,
    corrected_plan,
    faithful_execution,
    next_step,
    propose_plan,
    push_memory,
    replan,
    retrospect,
)
from .translator import FeedbackLine, TextObs, apply_text_noise, translate_outcome, translate_state
from .world import (
    SkillAction,
    StepOutcome,
    TaskSpec,
    VisualObs,
    WorldState,
    apply_visual_noise,
    check_success,
    render_visual,
    step_skill,
    valid_actions,
)

logger = logging.getLogger(__name__)

Suite = Sequence[Tuple[WorldState, TaskSpec]]


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from any printable parts."""
    digest = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


@dataclass(frozen=True)
class TrainerConfig:
    max_trials: int = 12
    epochs_per_trial: int = 5
    horizon: int = 30
    beta: float = 0.1
    memory_cap: int = 3
    dpo_lr: float = 1.0
    ce_lr: float = 0.5
    plan_epochs: int = 40
    plan_lr: float = 0.5
    batch_size: int = 16
    master_seed: int = 0
    loss_mode: str = "dpo"
    replanning: bool = True
    stop_when_solved: bool = True
    greedy_eval: bool = True
    train_noise: float = 0.0
    max_workers: int = 4
    window: int = 5
    temperature: float = 1.0
    bc_epochs: int = 200
    bc_lr: float = 0.5

    def __post_init__(self) -> None:
        if self.loss_mode not in ("dpo", "ce"):
            raise ValueError(f"loss_mode must be 'dpo' or 'ce', got {self.loss_mode!r}")
        for name in ("max_trials", "epochs_per_trial", "horizon", "plan_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must not be negative")
        for name in ("beta", "dpo_lr", "ce_lr", "plan_lr", "batch_size", "memory_cap", "max_workers", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.train_noise <= 1.0:
            raise ValueError("train_noise must be in [0, 1]")

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]]) -> "TrainerConfig":
        if not config:
            return cls()
        values: Dict[str, Any] = dict(config.get("trainer", {}))
        executor = config.get("executor", {})
        values.update({k: executor[k] for k in ("window", "temperature", "bc_epochs", "bc_lr") if k in executor})
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectoryStep:
    visual: VisualObs
    text: TextObs
    action: SkillAction
    outcome: StepOutcome
    feedback: FeedbackLine
    state: WorldState  # before the step
    instruction: Optional[SkillAction]
    candidates: Tuple[SkillAction, ...]
    context: ExecutorContext


@dataclass
class Trajectory:
    task: TaskSpec
    steps: List[TrajectoryStep] = field(default_factory=list)
    success: bool = False
    trial_index: int = 0
    errors: PlannerErrorLog = field(default_factory=PlannerErrorLog)
    plans: List[Tuple[PlanContext, Plan]] = field(default_factory=list)
    replans: int = 0

    def text_steps(self) -> List[TextStep]:
        return [TextStep(s.text, s.action, s.feedback) for s in self.steps]

    def visual_steps(self) -> List[VisualStep]:
        return [VisualStep(s.visual, s.state) for s in self.steps]


class _EpisodePlanner:
    """Planner calls of one episode, with in-band error accounting."""

    def __init__(self, backend: PlannerBackend, ctx: PlanContext, traj: Trajectory):
        self.backend = backend
        self.ctx = ctx
        self.traj = traj
        self.plan: Optional[Plan] = None

    def _adopt(self, plan: Plan) -> None:
        self.plan = plan
        self.ctx.plan_adopted_at = len(self.ctx.text_history)
        self.traj.errors.plans += 1
        if self.ctx.world is not None and not faithful_execution(self.ctx.world, self.ctx.task, plan):
            self.traj.errors.failed_plans += 1
        snapshot = replace(self.ctx, text_history=list(self.ctx.text_history))
        self.traj.plans.append((snapshot, plan))

    def propose(self) -> None:
        try:
            self._adopt(propose_plan(self.ctx, self.backend))
        except (PlanParseError, WireTimeoutError) as e:
            logger.warning(f"{self.ctx.task.task_id}: no initial plan ({e})")
            self.traj.errors.parse_failures += 1

    def revise(self, failure: FeedbackLine) -> None:
        if self.plan is None:
            self.propose()
            return
        try:
            self._adopt(replan(self.ctx, self.plan, failure, self.backend))
            self.traj.replans += 1
        except NoProgressError as e:
            logger.debug(str(e))
            self.traj.errors.no_progress += 1
        except (PlanParseError, WireTimeoutError) as e:
            logger.warning(f"{self.ctx.task.task_id}: replan failed ({e})")
            self.traj.errors.parse_failures += 1
        except UnsolvableTaskError as e:
            logger.error(f"{self.ctx.task.task_id}: {e}")

    def instruction(self) -> Optional[SkillAction]:
        return next_step(self.ctx, self.plan) if self.plan is not None else None


def run_episode(
    world: WorldState,
    task: TaskSpec,
    theta: PolicyParams,
    planner: PlannerBackend,
    config: TrainerConfig,
    *,
    memory: Optional[MemoryPool] = None,
    seed: int = 0,
    trial_index: int = 0,
    greedy: bool = False,
    visual_noise: float = 0.0,
    text_noise: float = 0.0,
) -> Trajectory:
    """
    Roll one episode out in the closed loop.

    At every step the planner supplies its current instruction, the
    executor picks among the valid actions plus that instruction, and the
    world steps. Any failed step, or a plan that runs out, triggers a
    replan when replanning is on; with replanning off the episode ends once
    the plan is used up.

    Args:
        world: Initial world state
        task: Task to solve
        theta: Executor parameters
        planner: Planner backend
        config: Trainer configuration (horizon, replanning, window, temperature)
        memory: The task's retrospective memory
        seed: Seed for action sampling and noise
        trial_index: Trial this episode belongs to
        greedy: Take the most probable action instead of sampling
        visual_noise: Rectangle-crop noise rate on the raster
        text_noise: Token noise rate on the text observations

    Returns:
        Trajectory; every failure mode is recorded in-band
    """
    state = replace(world, horizon=config.horizon, step_count=0)
    traj = Trajectory(task=task, trial_index=trial_index)
    rng = np.random.default_rng(seed)
    text = apply_text_noise(translate_state(state), text_noise, derive_seed(seed, "text", 0))
    pool = memory if memory is not None else MemoryPool(cap=config.memory_cap)
    ctx = PlanContext(task, text, pool, world=state)
    episode_planner = _EpisodePlanner(planner, ctx, traj)
    if state.horizon > 0:
        episode_planner.propose()

    while state.step_count < state.horizon:
        instruction = episode_planner.instruction()
        if instruction == PLAN_EXHAUSTED:
            if not config.replanning:
                break
            episode_planner.revise(FeedbackLine("[Plan exhausted]", EXHAUSTED_CODE))
            instruction = episode_planner.instruction()
            if instruction == PLAN_EXHAUSTED:
                break

        t = state.step_count
        visual = apply_visual_noise(render_visual(state), visual_noise, derive_seed(seed, "visual", t))
        if t > 0:
            text = apply_text_noise(translate_state(state), text_noise, derive_seed(seed, "text", t))
        exec_ctx = ExecutorContext.from_state(state, instruction)
        candidates = list(valid_actions(state))
        if instruction is not None and instruction not in candidates:
            candidates.append(instruction)
        features = featurize(visual, task, exec_ctx, config.window)
        dist = policy_dist(theta, features, candidates, config.temperature)
        action = dist.argmax() if greedy else dist.sample(rng)

        new_state, outcome, _ = step_skill(state, action)
        feedback = translate_outcome(outcome, action, new_state)
        traj.steps.append(TrajectoryStep(
            visual, text, action, outcome, feedback, state, instruction, tuple(candidates), exec_ctx,
        ))
        ctx.text_history.append(TextStep(text, action, feedback))
        ctx.world = new_state
        state = new_state

        if check_success(state, task):
            traj.success = True
            break
        if not outcome.success and config.replanning:
            episode_planner.revise(feedback)

    logger.debug(
        "%s trial %d: %s in %d steps", task.task_id, trial_index,
        "success" if traj.success else "failure", len(traj.steps),
    )
    return traj


# ---------------------------------------------------------------------------
# Aggregation and policy training
# ---------------------------------------------------------------------------

@dataclass
class AggDataset:
    """Append-only preference dataset."""

    pairs: List[PreferencePair] = field(default_factory=list)

    def extend(self, pairs: Sequence[PreferencePair]) -> None:
        self.pairs.extend(pairs)

    def informative(self) -> List[PreferencePair]:
        return [p for p in self.pairs if not p.degenerate]

    def __len__(self) -> int:
        return len(self.pairs)


def aggregate(
    traj: Trajectory,
    planner: PlannerBackend,
    memory: MemoryPool,
    window: int = 5,
) -> Tuple[List[PreferencePair], MemoryPool]:
    """
    Preference pairs for every step of an episode, plus the memory pool
    with the episode's retrospection pushed onto it.
    """
    pairs: List[PreferencePair] = []
    text_steps = traj.text_steps()
    for t, step in enumerate(traj.steps):
        ctx = PlanContext(
            traj.task, step.text, memory, text_steps[:t], world=step.state,
        )
        try:
            expert = corrected_action(ctx, t, planner)
        except (PlanParseError, WireTimeoutError, UnsolvableTaskError) as e:
            logger.warning(f"{traj.task.task_id} step {t}: no expert action ({e})")
            continue
        candidates = step.candidates if expert in step.candidates else (*step.candidates, expert)
        pairs.append(PreferencePair(
            traj.task, step.visual, step.action, expert, candidates, step.context, window,
        ))
    if traj.steps:
        try:
            record = retrospect(
                text_steps, traj.visual_steps(), planner,
                task=traj.task, success=traj.success, trial_index=traj.trial_index,
            )
            memory = push_memory(memory, record)
        except (PlanParseError, WireTimeoutError) as e:
            logger.warning(f"{traj.task.task_id}: retrospection failed ({e})")
            traj.errors.parse_failures += 1
    return pairs, memory


def corrected_plans(traj: Trajectory) -> List[Tuple[PlanContext, Plan]]:
    """Plan-model training pairs: the oracle's plan at every context where the planner adopted one."""
    corpus = []
    for ctx, _ in traj.plans:
        plan = corrected_plan(ctx)
        if plan is not None:
            corpus.append((ctx, plan))
    return corpus


def train_policy(
    dataset: AggDataset,
    theta: PolicyParams,
    ref: PolicyParams,
    config: TrainerConfig,
    seed: int = 0,
    history: Optional[List[float]] = None,
) -> PolicyParams:
    """
    Minibatch gradient descent on the aggregated dataset.

    DPO mode drops pairs whose executed and expert actions agree; the
    cross-entropy ablation trains on every pair. An empty training set
    returns theta unchanged.

    Args:
        history: Optional list receiving each epoch's mean minibatch loss
    """
    pairs = dataset.informative() if config.loss_mode == "dpo" else list(dataset.pairs)
    if not pairs:
        return theta
    rng = np.random.default_rng(seed)
    for epoch in range(config.epochs_per_trial):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            if config.loss_mode == "dpo":
                losses.extend(dpo_loss(theta, ref, p, config.beta) for p in batch)
                theta = theta.step(dpo_grad(theta, ref, batch, config.beta), config.dpo_lr)
            else:
                losses.extend(ce_loss(theta, p) for p in batch)
                theta = theta.step(ce_grad(theta, batch), config.ce_lr)
        mean = float(np.mean(losses))
        if history is not None:
            history.append(mean)
        logger.info(f"Epoch {epoch + 1}/{config.epochs_per_trial}: mean {config.loss_mode} loss {mean:.4f}")
    return theta


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

@dataclass
class TrialReport:
    trial_index: int
    successes: Dict[str, bool]
    steps: Dict[str, int]
    dataset_size: int
    mean_loss: Optional[float]
    plan_nll: Optional[float]
    planner_errors: int
    error_log: PlannerErrorLog = field(default_factory=PlannerErrorLog)
    greedy_successes: Dict[str, bool] = field(default_factory=dict)
    greedy_steps: Dict[str, int] = field(default_factory=dict)
    task_errors: Dict[str, int] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return float(np.mean(list(self.successes.values()))) if self.successes else 0.0

    @property
    def avg_steps(self) -> Optional[float]:
        """Mean steps over successful episodes only."""
        done = [self.steps[t] for t, ok in self.successes.items() if ok]
        return float(np.mean(done)) if done else None

    @property
    def greedy_success_rate(self) -> Optional[float]:
        if not self.greedy_successes:
            return None
        return float(np.mean(list(self.greedy_successes.values())))

    def summary(self) -> Dict[str, Any]:
        return {
            "trial": self.trial_index,
            "success_rate": self.success_rate,
            "avg_steps": self.avg_steps,
            "greedy_success_rate": self.greedy_success_rate,
            "dataset_size": self.dataset_size,
            "mean_loss": self.mean_loss,
            "plan_nll": self.plan_nll,
            "planner_errors": self.planner_errors,
            "parse_failures": self.error_log.parse_failures,
            "no_progress": self.error_log.no_progress,
            "failed_plans": self.error_log.failed_plans,
        }


def count_planner_errors(reports: Sequence[TrialReport]) -> int:
    """Parse failures, no-progress replans and failing plans across all reports."""
    return sum(r.planner_errors for r in reports)


@dataclass
class TrainerState:
    """Everything needed to resume training after a completed trial."""

    theta: PolicyParams
    ref: PolicyParams
    dataset: AggDataset
    memories: Dict[str, MemoryPool]
    plan_params: PlanModelParams
    plan_corpus: List[Tuple[PlanContext, Plan]]
    reports: List[TrialReport]

    def save(self, path: Union[str, Path]) -> None:
        with Path(path).open("wb") as f:
            pickle.dump(self, f)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainerState":
        with Path(path).open("rb") as f:
            return pickle.load(f)


def run_suite(
    suite: Suite,
    theta: PolicyParams,
    planner: PlannerBackend,
    config: TrainerConfig,
    *,
    trial_index: int = 0,
    memories: Optional[Dict[str, MemoryPool]] = None,
    greedy: bool = False,
    visual_noise: float = 0.0,
    text_noise: float = 0.0,
    seed_tag: str = "behaviour",
    progress: Optional[Progress] = None,
) -> List[Trajectory]:
    """Run one episode per task concurrently; results come back in suite order."""
    memories = memories or {}
    workers = 1 if planner.kind == "wire" else config.max_workers
    bar = progress.add_task(f"[cyan]Trial {trial_index} ({seed_tag})", total=len(suite)) if progress else None

    def one(item: Tuple[WorldState, TaskSpec]) -> Trajectory:
        world, task = item
        traj = run_episode(
            world, task, theta, planner, config,
            memory=memories.get(task.task_id, MemoryPool(cap=config.memory_cap)),
            seed=derive_seed(config.master_seed, trial_index, task.task_id, seed_tag),
            trial_index=trial_index,
            greedy=greedy,
            visual_noise=visual_noise,
            text_noise=text_noise,
        )
        if progress is not None:
            progress.update(bar, advance=1)
        return traj

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, suite))


def _trajectory_records(traj: Trajectory, experts: Dict[int, SkillAction]) -> List[Dict[str, Any]]:
    return [
        {
            "trial": traj.trial_index,
            "task_id": traj.task.task_id,
            "step": t,
            "action": step.action.surface_form,
            "instruction": step.instruction.surface_form if step.instruction else None,
            "outcome": step.outcome.feedback_code,
            "expert": experts[t].surface_form if t in experts else None,
            "success": traj.success,
        }
        for t, step in enumerate(traj.steps)
    ]


def _write_trial(
    out: Path,
    report: TrialReport,
    theta: PolicyParams,
    plan_params: PlanModelParams,
    records: List[Dict[str, Any]],
    window: int,
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(theta, out / "policy.npz", window=window, trial=report.trial_index)
    plan_params.save(out / "plan_model.npz")
    with (out / "trajectories.jsonl").open("w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    with (out / "report.json").open("w") as f:
        json.dump({
            **report.summary(),
            "successes": report.successes,
            "steps": report.steps,
            "greedy_successes": report.greedy_successes,
            "task_errors": report.task_errors,
        }, f, indent=2)


def reports_frame(reports: Sequence[TrialReport]) -> pd.DataFrame:
    return pd.DataFrame([r.summary() for r in reports])


def bootstrap_reference(suite: Suite, config: TrainerConfig) -> PolicyParams:
    """Behaviour-clone the reference policy from oracle rollouts of a suite."""
    demos = collect_demos(list(suite), config.window)
    if not demos:
        return PolicyParams.zeros(config.window)
    return bc_pretrain(demos, config.bc_epochs, config.bc_lr, config.window)


def run_training(
    config: TrainerConfig,
    suite: Suite,
    planner: Optional[PlannerBackend] = None,
    *,
    ref: Optional[PolicyParams] = None,
    output_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    show_progress: bool = True,
    raw_config: Optional[Dict[str, Any]] = None,
) -> Tuple[List[TrialReport], PolicyParams]:
    """
    Run the trial loop until max_trials or, with stop_when_solved, until a
    trial solves every task.

    Args:
        config: Trainer configuration
        suite: (initial world, task) pairs
        planner: Planner backend; the oracle by default
        ref: Frozen reference policy; behaviour-cloned from the suite when omitted
        output_dir: When given, per-trial checkpoints, trajectories, reports
            and a run manifest are written there
        resume: Continue from the trainer state saved in output_dir
        show_progress: Show a rich progress bar
        raw_config: Full configuration dict recorded in the manifest

    Returns:
        (one TrialReport per completed trial, final executor parameters)
    """
    if not suite:
        raise ValueError("run_training needs a non-empty suite")
    planner = planner or PlannerBackend()
    out = Path(output_dir) if output_dir is not None else None
    state_file = out / "trainer_state.pkl" if out else None

    if resume and state_file is not None and state_file.exists():
        state = TrainerState.load(state_file)
        logger.info(f"Resuming after trial {len(state.reports) - 1}")
    else:
        ref = ref if ref is not None else bootstrap_reference(suite, config)
        state = TrainerState(
            theta=ref, ref=ref, dataset=AggDataset(), memories={},
            plan_params=PlanModelParams.zeros(horizon=config.horizon), plan_corpus=[], reports=[],
        )

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "trainer": asdict(config),
            "config": raw_config,
            "master_seed": config.master_seed,
            "planner": planner.kind,
            "suite": [t.task_id for _, t in suite],
        }
        with (out / "manifest.json").open("w") as f:
            json.dump(manifest, f, indent=2, default=str)

    console = Console()
    with Progress(console=console, disable=not show_progress) as progress:
        for trial in range(len(state.reports), config.max_trials):
            last = state.reports[-1] if state.reports else None
            if config.stop_when_solved and last is not None and all(last.successes.values()):
                logger.info(f"All tasks solved after trial {last.trial_index}; stopping")
                break

            trajectories = run_suite(
                suite, state.theta, planner, config,
                trial_index=trial, memories=state.memories,
                visual_noise=config.train_noise, progress=progress,
            )

            errors = PlannerErrorLog()
            records: List[Dict[str, Any]] = []
            for traj in trajectories:
                tid = traj.task.task_id
                memory = state.memories.get(tid, MemoryPool(cap=config.memory_cap))
                pairs, state.memories[tid] = aggregate(traj, planner, memory, config.window)
                state.dataset.extend(pairs)
                state.plan_corpus.extend(corrected_plans(traj))
                errors = errors.merge(traj.errors)
                experts = {}
                for t, step in enumerate(traj.steps):
                    match = next((p for p in pairs if p.obs is step.visual), None)
                    if match is not None:
                        experts[t] = match.expert
                records.extend(_trajectory_records(traj, experts))

            losses: List[float] = []
            state.theta = train_policy(
                state.dataset, state.theta, state.ref, config,
                seed=derive_seed(config.master_seed, trial, "train"), history=losses,
            )
            plan_nll = None
            if state.plan_corpus and config.plan_epochs > 0:
                state.plan_params = finetune_plan_model(
                    state.plan_params, state.plan_corpus, config.plan_epochs, config.plan_lr,
                )
                plan_nll = corpus_nll(state.plan_params, state.plan_corpus)

            report = TrialReport(
                trial_index=trial,
                successes={t.task.task_id: t.success for t in trajectories},
                steps={t.task.task_id: len(t.steps) for t in trajectories},
                dataset_size=len(state.dataset),
                mean_loss=losses[-1] if losses else None,
                plan_nll=plan_nll,
                planner_errors=errors.total,
                error_log=errors,
                task_errors={t.task.task_id: t.errors.total for t in trajectories},
            )
            if config.greedy_eval:
                greedy = run_suite(
                    suite, state.theta, planner, config,
                    trial_index=trial, memories=state.memories, greedy=True,
                    seed_tag="greedy", progress=progress,
                )
                report.greedy_successes = {t.task.task_id: t.success for t in greedy}
                report.greedy_steps = {t.task.task_id: len(t.steps) for t in greedy}
            state.reports.append(report)
            logger.info(
                f"Trial {trial}: success {report.success_rate:.3f}, |D| {report.dataset_size}, "
                f"planner errors {report.planner_errors}"
            )

            if out is not None:
                _write_trial(out / f"trial_{trial:02d}", report, state.theta, state.plan_params, records, config.window)
                reports_frame(state.reports).to_csv(out / "reports.csv", index=False)
                state.save(state_file)

    return state.reports, state.theta
