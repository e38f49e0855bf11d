"""
High-level functions behind the coplan command line.

1. Suites: `suite_refs` / `write_suite` / `read_suite` / `load_suite`
   produce and persist task references (task id, family, seed, OOD and
   stuck flags); worlds are always regenerated from their seeds.

2. `train(config, suite_path, out)`: runs the co-training trial loop and
   writes checkpoints, trajectories and reports under `out`.

3. `evaluate_checkpoint` / `sweep_checkpoint`: greedy evaluation of a saved
   executor under visual and/or textual noise.

4. `ablate(mode, config, suite_path)`: matched-seed full vs ablated runs
   (no replanning, or cross-entropy instead of the preference loss).

5. `planner_error_table(run_dir)`: planner mistakes per trial, split into
   seen and OOD tasks.
"""

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .config import load_config
from .evaluation import EvalReport, evaluate, sweep
from .executor import PolicyParams, load_checkpoint
from .planner import PlannerBackend
from .trainer import Suite, TrainerConfig, TrialReport, run_training
from .world import TASK_TYPES, TaskSpec, WorldParams, WorldState, generate_task, task_id_for

logger = logging.getLogger(__name__)

SUITE_KINDS = ("seen", "ood", "stuck")
ABLATIONS = ("no-replan", "ce-loss")


@dataclass(frozen=True)
class TaskRef:
    """One suite line; the world itself is regenerated from the seed."""

    task_id: str
    task_type: str
    seed: int
    ood: bool = False
    stuck: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskRef":
        if data.get("task_type") not in TASK_TYPES:
            raise ValueError(f"Unknown task type {data.get('task_type')!r} in suite")
        return cls(
            task_id=str(data["task_id"]),
            task_type=data["task_type"],
            seed=int(data["seed"]),
            ood=bool(data.get("ood", False)),
            stuck=bool(data.get("stuck", False)),
        )


@dataclass(frozen=True)
class SuiteSpec:
    seen_per_type: int = 20
    ood_total: int = 134
    stuck_total: int = 60
    seed: int = 0
    ood_seed_offset: int = 1_000_000
    stuck_seed_offset: int = 2_000_000

    def __post_init__(self) -> None:
        for name in ("seen_per_type", "ood_total", "stuck_total"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must not be negative")
        if self.ood_seed_offset == self.stuck_seed_offset or min(self.ood_seed_offset, self.stuck_seed_offset) <= 0:
            raise ValueError("OOD and stuck seed offsets must be positive and distinct")

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]]) -> "SuiteSpec":
        if not config:
            return cls()
        section = config.get("suites", config)
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _split_evenly(total: int) -> List[int]:
    base, extra = divmod(total, len(TASK_TYPES))
    return [base + (1 if i < extra else 0) for i in range(len(TASK_TYPES))]


def suite_refs(spec: SuiteSpec, kind: str = "seen") -> List[TaskRef]:
    """
    Task references of one suite, grouped by family in catalog order.

    Seen tasks use seeds spec.seed + i; OOD and stuck tasks add their own
    offsets, so the three seed ranges never overlap for the default sizes.
    """
    if kind not in SUITE_KINDS:
        raise ValueError(f"Unknown suite kind {kind!r}; choose from {SUITE_KINDS}")
    if kind == "seen":
        counts, offset = [spec.seen_per_type] * len(TASK_TYPES), 0
    elif kind == "ood":
        counts, offset = _split_evenly(spec.ood_total), spec.ood_seed_offset
    else:
        counts, offset = _split_evenly(spec.stuck_total), spec.stuck_seed_offset
    ood, stuck = kind == "ood", kind == "stuck"
    refs = []
    for task_type, count in zip(TASK_TYPES, counts):
        for i in range(count):
            seed = spec.seed + offset + i
            refs.append(TaskRef(task_id_for(task_type, seed, ood, stuck), task_type, seed, ood, stuck))
    return refs


def write_suite(refs: Sequence[TaskRef], path: Union[str, Path]) -> Path:
    """Write one JSON object per line; an empty suite gives an empty file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for ref in refs:
            f.write(ref.to_json() + "\n")
    logger.info(f"Wrote {len(refs)} task references to {path}")
    return path


def read_suite(path: Union[str, Path]) -> List[TaskRef]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Suite file not found: {path}")
    refs = []
    with path.open() as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                refs.append(TaskRef.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"Invalid suite line {n} in {path}: {e}") from e
    return refs


def load_suite(refs: Sequence[TaskRef], params: Optional[WorldParams] = None) -> List[Tuple[WorldState, TaskSpec]]:
    """Regenerate every referenced world; ids must round-trip."""
    suite = []
    for ref in refs:
        world, task = generate_task(ref.seed, ref.task_type, ood=ref.ood, stuck=ref.stuck, params=params)
        if task.task_id != ref.task_id:
            raise ValueError(f"Suite reference {ref.task_id} regenerated as {task.task_id}")
        suite.append((world, task))
    return suite


def generate_suite_file(
    kind: str,
    path: Union[str, Path],
    config: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
) -> List[TaskRef]:
    """Build a suite from the config's suites section and write it to path."""
    config = config or load_config()
    spec = SuiteSpec.from_config(config)
    if seed is not None:
        spec = SuiteSpec(**{**asdict(spec), "seed": seed})
    refs = suite_refs(spec, kind)
    write_suite(refs, path)
    return refs


def _suite_from_file(path: Union[str, Path], config: Dict[str, Any]) -> Suite:
    return load_suite(read_suite(path), WorldParams.from_config(config))


def _with_overrides(config: Dict[str, Any], **trainer: Any) -> Dict[str, Any]:
    config = copy.deepcopy(config)
    config.setdefault("trainer", {}).update({k: v for k, v in trainer.items() if v is not None})
    return config


def train(
    config: Dict[str, Any],
    suite_path: Union[str, Path],
    output_dir: Union[str, Path],
    *,
    resume: bool = False,
    show_progress: bool = True,
    planner: Optional[PlannerBackend] = None,
) -> Tuple[List[TrialReport], PolicyParams]:
    """
    Co-train planner and executor on a suite file.

    Writes manifest.json, reports.csv, trainer_state.pkl and one
    trial_XX/ directory per trial (policy.npz, plan_model.npz,
    trajectories.jsonl, report.json) under output_dir.
    """
    suite = _suite_from_file(suite_path, config)
    trainer_config = TrainerConfig.from_config(config)
    planner = planner or PlannerBackend.from_config(config, audit_dir=Path(output_dir))
    return run_training(
        trainer_config, suite, planner,
        output_dir=output_dir, resume=resume, show_progress=show_progress, raw_config=config,
    )


def _run_dir(checkpoint: Union[str, Path]) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint if checkpoint.is_dir() else checkpoint.parent


def _load_policy(checkpoint: Union[str, Path], config: TrainerConfig) -> PolicyParams:
    checkpoint = Path(checkpoint)
    if checkpoint.is_dir():
        trials = sorted(checkpoint.glob("trial_*/policy.npz"))
        if not trials:
            raise FileNotFoundError(f"No policy checkpoints under {checkpoint}")
        checkpoint = trials[-1]
    if not checkpoint.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    theta, meta = load_checkpoint(checkpoint, window=config.window)
    logger.info(f"Loaded {checkpoint} (trial {meta.get('trial')})")
    return theta


def evaluate_checkpoint(
    checkpoint: Union[str, Path],
    suite_path: Union[str, Path],
    config: Dict[str, Any],
    *,
    noise_rate: float = 0.0,
    channel: Optional[str] = None,
    seeds: int = 1,
    planner: Optional[PlannerBackend] = None,
) -> EvalReport:
    """
    Greedy evaluation of a saved policy (a policy.npz, or a run directory
    whose latest trial checkpoint is used).

    Raises:
        SchemaMismatchError: if the checkpoint's feature schema differs
    """
    trainer_config = TrainerConfig.from_config(config)
    theta = _load_policy(checkpoint, trainer_config)
    return evaluate(
        _suite_from_file(suite_path, config), theta,
        planner or PlannerBackend.from_config(config, audit_dir=_run_dir(checkpoint)), trainer_config,
        noise_rate=noise_rate,
        channel=channel or config.get("evaluation", {}).get("channel", "visual"),
        seeds=seeds,
        raw_config=config,
    )


def sweep_checkpoint(
    checkpoint: Union[str, Path],
    suite_path: Union[str, Path],
    config: Dict[str, Any],
    *,
    rates: Optional[Sequence[float]] = None,
    channel: Optional[str] = None,
    seeds: Optional[int] = None,
    planner: Optional[PlannerBackend] = None,
    show_progress: bool = True,
) -> List[EvalReport]:
    """One EvalReport per noise rate, defaults from the evaluation section."""
    section = config.get("evaluation", {})
    trainer_config = TrainerConfig.from_config(config)
    return sweep(
        _suite_from_file(suite_path, config),
        _load_policy(checkpoint, trainer_config),
        planner or PlannerBackend.from_config(config, audit_dir=_run_dir(checkpoint)),
        trainer_config,
        list(rates) if rates is not None else list(section.get("sweep_rates", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])),
        channel=channel or section.get("channel", "visual"),
        seeds=seeds if seeds is not None else int(section.get("sweep_seeds", 10)),
        raw_config=config,
        show_progress=show_progress,
    )


def ablate(
    mode: str,
    config: Dict[str, Any],
    suite_path: Union[str, Path],
    *,
    output_dir: Optional[Union[str, Path]] = None,
    show_progress: bool = True,
    planner: Optional[PlannerBackend] = None,
) -> pd.DataFrame:
    """
    Run the full method and one ablation with the same master seed.

    Args:
        mode: "no-replan" turns replanning off, "ce-loss" swaps the
            preference loss for cross-entropy on the expert actions
        config: Configuration dict
        suite_path: Suite file both runs share
        output_dir: When given, the runs are written to full/ and ablated/

    Returns:
        One row per trial with the metrics of both runs side by side
    """
    if mode not in ABLATIONS:
        raise ValueError(f"Unknown ablation {mode!r}; choose from {ABLATIONS}")
    suite = _suite_from_file(suite_path, config)
    out = Path(output_dir) if output_dir is not None else None
    planner = planner or PlannerBackend.from_config(config, audit_dir=out)
    ablated = _with_overrides(config, replanning=False) if mode == "no-replan" else _with_overrides(config, loss_mode="ce")

    frames = {}
    for label, cfg in (("full", config), ("ablated", ablated)):
        reports, _ = run_training(
            TrainerConfig.from_config(cfg), suite, planner,
            output_dir=out / label if out else None, show_progress=show_progress, raw_config=cfg,
        )
        frames[label] = pd.DataFrame([
            {
                "trial": r.trial_index,
                "success": r.success_rate,
                "greedy_success": r.greedy_success_rate,
                "mean_loss": r.mean_loss,
                "avg_steps": r.avg_steps,
            }
            for r in reports
        ], columns=["trial", "success", "greedy_success", "mean_loss", "avg_steps"])

    table = frames["full"].merge(frames["ablated"], on="trial", how="outer", suffixes=("_full", "_ablated"))
    table.insert(0, "mode", mode)
    table["success_gap"] = table["success_full"] - table["success_ablated"]
    return table


def _is_ood(task_id: str) -> bool:
    return "-ood-" in task_id


def planner_error_table(run_dir: Union[str, Path]) -> pd.DataFrame:
    """
    Planner mistakes per trial of a finished run.

    Reads trial_XX/report.json and splits per-task error counts into tasks
    from the seen and the OOD layout distributions.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"Run directory not found: {run_dir}")
    rows = []
    for report_file in sorted(run_dir.glob("trial_*/report.json")):
        with report_file.open() as f:
            report = json.load(f)
        errors = report.get("task_errors", {})
        seen = sum(n for tid, n in errors.items() if not _is_ood(tid))
        ood = sum(n for tid, n in errors.items() if _is_ood(tid))
        rows.append({
            "trial": report["trial"],
            "errors_seen": seen,
            "errors_ood": ood,
            "parse_failures": report["parse_failures"],
            "no_progress": report["no_progress"],
            "failed_plans": report["failed_plans"],
            "total": report["planner_errors"],
        })
    columns = ["trial", "errors_seen", "errors_ood", "parse_failures", "no_progress", "failed_plans", "total"]
    return pd.DataFrame(rows, columns=columns)
