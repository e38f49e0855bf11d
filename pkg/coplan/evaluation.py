"""
Greedy evaluation of a trained executor, with optional observation noise.

An evaluation runs every task of a suite once per seed with the argmax
policy and the planner enabled, then reports success and interaction
steps per task family.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from rich.console import Console
from rich.progress import Progress

from .executor import PolicyParams
from .planner import PlannerBackend
from .trainer import Suite, TrainerConfig, Trajectory, run_suite
from .world import TASK_SLUGS, TASK_TYPES

logger = logging.getLogger(__name__)

EVAL_SCHEMA_VERSION = 1
CHANNELS = ("visual", "textual", "both")
REPORT_COLUMNS = tuple(TASK_SLUGS[t].capitalize() for t in TASK_TYPES)


class ReportSchemaError(ValueError):
    """Raised when a serialized EvalReport does not match the current schema."""


def config_digest(config: Optional[Dict[str, Any]]) -> str:
    """Short stable digest of a configuration mapping."""
    payload = json.dumps(config or {}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    """Per-family and average success and steps for one noise setting."""

    success: Dict[str, Optional[float]]
    steps: Dict[str, Optional[float]]
    steps_all: Dict[str, Optional[float]]
    noise_rate: float
    channel: str
    config_digest: str
    episodes: int
    seeds: int = 1
    horizon: int = 30
    schema_version: int = EVAL_SCHEMA_VERSION
    task_success: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        validate_eval_report(data)
        return cls(**data)

    def row(self) -> Dict[str, Any]:
        """Flat table row with one success and one steps column per family."""
        row: Dict[str, Any] = {"noise_rate": self.noise_rate, "channel": self.channel}
        for column in (*REPORT_COLUMNS, "Avg"):
            row[column] = self.success[column]
        for column in (*REPORT_COLUMNS, "Avg"):
            row[f"{column} steps"] = self.steps[column]
        row["Avg steps-all"] = self.steps_all["Avg"]
        row["episodes"] = self.episodes
        return row


def validate_eval_report(data: Dict[str, Any]) -> None:
    """
    Check a serialized EvalReport against the current schema.

    Raises:
        ReportSchemaError: on a version mismatch, missing fields, wrong
            family columns, rates outside [0, 1] or steps above the horizon
    """
    if data.get("schema_version") != EVAL_SCHEMA_VERSION:
        raise ReportSchemaError(
            f"Report schema version {data.get('schema_version')!r}, expected {EVAL_SCHEMA_VERSION}"
        )
    missing = [name for name in EvalReport.__dataclass_fields__ if name not in data]
    if missing:
        raise ReportSchemaError(f"Report is missing fields: {', '.join(missing)}")
    expected = {*REPORT_COLUMNS, "Avg"}
    horizon = data["horizon"]
    for section in ("success", "steps", "steps_all"):
        if set(data[section]) != expected:
            raise ReportSchemaError(f"{section} columns {sorted(data[section])} != {sorted(expected)}")
    for column, rate in data["success"].items():
        if rate is not None and not 0.0 <= rate <= 1.0:
            raise ReportSchemaError(f"Success rate {rate} for {column} is outside [0, 1]")
    for section in ("steps", "steps_all"):
        for column, steps in data[section].items():
            if steps is not None and not 0.0 <= steps <= horizon:
                raise ReportSchemaError(f"{section} {steps} for {column} exceeds horizon {horizon}")
    if data["channel"] not in CHANNELS:
        raise ReportSchemaError(f"Unknown noise channel {data['channel']!r}")
    if not 0.0 <= data["noise_rate"] <= 1.0:
        raise ReportSchemaError(f"Noise rate {data['noise_rate']} is outside [0, 1]")


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def summarize(
    trajectories: Sequence[Trajectory],
    *,
    noise_rate: float,
    channel: str,
    digest: str,
    seeds: int,
    horizon: int,
) -> EvalReport:
    """Fold evaluation episodes into an EvalReport; empty families report None."""
    success: Dict[str, Optional[float]] = {}
    steps: Dict[str, Optional[float]] = {}
    steps_all: Dict[str, Optional[float]] = {}
    groups = {column: [t for t in trajectories if t.task.task_type == task_type]
              for column, task_type in zip(REPORT_COLUMNS, TASK_TYPES)}
    groups["Avg"] = list(trajectories)
    for column, group in groups.items():
        success[column] = _mean([float(t.success) for t in group])
        steps[column] = _mean([len(t.steps) for t in group if t.success])
        # failures count as the full horizon
        steps_all[column] = _mean([len(t.steps) if t.success else horizon for t in group])

    per_task: Dict[str, List[float]] = {}
    for t in trajectories:
        per_task.setdefault(t.task.task_id, []).append(float(t.success))
    return EvalReport(
        success=success,
        steps=steps,
        steps_all=steps_all,
        noise_rate=noise_rate,
        channel=channel,
        config_digest=digest,
        episodes=len(trajectories),
        seeds=seeds,
        horizon=horizon,
        task_success={tid: float(np.mean(bits)) for tid, bits in per_task.items()},
    )


def evaluate(
    suite: Suite,
    theta: PolicyParams,
    planner: PlannerBackend,
    config: TrainerConfig,
    *,
    noise_rate: float = 0.0,
    channel: str = "visual",
    seeds: int = 1,
    raw_config: Optional[Dict[str, Any]] = None,
    progress: Optional[Progress] = None,
) -> EvalReport:
    """
    Greedy rollouts of every suite task under observation noise.

    Args:
        suite: (initial world, task) pairs
        theta: Executor parameters
        planner: Planner backend
        config: Trainer configuration (horizon, window, replanning, workers)
        noise_rate: Corruption rate in [0, 1]
        channel: Where the noise goes: "visual", "textual" or "both"
        seeds: Number of noise seeds per task
        raw_config: Configuration recorded by digest in the report
        progress: Existing rich Progress to report into; one is created otherwise

    Returns:
        EvalReport over len(suite) * seeds episodes
    """
    if channel not in CHANNELS:
        raise ValueError(f"channel must be one of {CHANNELS}, got {channel!r}")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise_rate must be in [0, 1], got {noise_rate}")
    if seeds < 1:
        raise ValueError("seeds must be at least 1")
    visual = noise_rate if channel in ("visual", "both") else 0.0
    text = noise_rate if channel in ("textual", "both") else 0.0

    def run(bar: Progress) -> List[Trajectory]:
        trajectories: List[Trajectory] = []
        for s in range(seeds):
            trajectories.extend(run_suite(
                suite, theta, planner, config,
                greedy=True, visual_noise=visual, text_noise=text,
                seed_tag=f"eval-{s}", progress=bar,
            ))
        return trajectories

    if progress is not None:
        trajectories = run(progress)
    else:
        with Progress(console=Console()) as bar:
            trajectories = run(bar)

    report = summarize(
        trajectories,
        noise_rate=noise_rate,
        channel=channel,
        digest=config_digest(raw_config if raw_config is not None else asdict(config)),
        seeds=seeds,
        horizon=config.horizon,
    )
    logger.info(f"Noise {noise_rate:.2f} ({channel}): success {report.success['Avg']:.3f}")
    return report


def sweep(
    suite: Suite,
    theta: PolicyParams,
    planner: PlannerBackend,
    config: TrainerConfig,
    rates: Sequence[float],
    *,
    channel: str = "visual",
    seeds: int = 10,
    raw_config: Optional[Dict[str, Any]] = None,
    show_progress: bool = True,
) -> List[EvalReport]:
    """One EvalReport per noise rate; every rate reuses the same seeds."""
    reports = []
    with Progress(console=Console(), disable=not show_progress) as progress:
        for rate in rates:
            reports.append(evaluate(
                suite, theta, planner, config,
                noise_rate=rate, channel=channel, seeds=seeds,
                raw_config=raw_config, progress=progress,
            ))
    return reports


def reports_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Plot-ready table, one row per report."""
    return pd.DataFrame([r.row() for r in reports])
