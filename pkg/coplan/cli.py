"""
coplan command line.

    coplan gen --suite seen --out suites/seen.jsonl
    coplan train --suite suites/seen.jsonl --out runs/seen
    coplan eval runs/seen --suite suites/ood.jsonl --noise 0.2 --channel visual
    coplan sweep runs/seen --suite suites/seen.jsonl
    coplan ablate --mode no-replan --suite suites/stuck.jsonl --out runs/ablate
    coplan errors runs/seen
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import api
from .config import ConfigError, load_config
from .evaluation import CHANNELS, EvalReport, reports_table
from .executor import SchemaMismatchError
from .trainer import reports_frame

app = typer.Typer(help="Co-train an LLM-style planner and a visual executor in a grid household.", no_args_is_help=True)
console = Console()
logger = logging.getLogger("coplan")


def _setup(config_path: Optional[Path], seed: Optional[int], backend: Optional[str]) -> Dict[str, Any]:
    try:
        config = load_config(config_path)
    except ConfigError as e:
        raise typer.BadParameter(str(e), param_hint="--config") from e
    logging.basicConfig(
        level=config.get("logging", {}).get("level", "INFO"),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True)],
        force=True,
    )
    if seed is not None:
        config.setdefault("trainer", {})["master_seed"] = seed
        config.setdefault("suites", {})["seed"] = seed
    if backend is not None:
        if backend not in ("oracle", "wire"):
            raise typer.BadParameter(f"{backend!r} is not one of oracle, wire", param_hint="--backend")
        config.setdefault("planner", {})["backend"] = backend
    return config


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise typer.BadParameter(f"{path} does not exist", param_hint=hint)
    return path


def _emit(frame: pd.DataFrame, out: Path, stem: str) -> None:
    """Write a table as CSV plus a JSON records mirror."""
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / f"{stem}.csv", index=False)
    frame.to_json(out / f"{stem}.json", orient="records", indent=2)
    logger.info(f"Wrote {out / stem}.csv and .json")


def _show(frame: pd.DataFrame, title: str) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(*("-" if pd.isna(v) else f"{v:.3f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)


def _write_eval(reports: List[EvalReport], out: Path, stem: str) -> pd.DataFrame:
    frame = reports_table(reports)
    _emit(frame, out, stem)
    with (out / f"{stem}_reports.json").open("w") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2)
    return frame


ConfigOption = typer.Option(None, "--config", help="YAML file overriding the packaged config.yaml")
SeedOption = typer.Option(None, "--seed", help="Master seed (also the suite seed for gen)")
BackendOption = typer.Option(None, "--backend", help="Planner backend: oracle or wire")


@app.command()
def gen(
    suite: str = typer.Option("seen", "--suite", help="Suite kind: seen, ood or stuck"),
    out: Path = typer.Option(..., "--out", help="Suite JSONL file to write"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
) -> None:
    """Write a suite of task references, one JSON object per line."""
    cfg = _setup(config, seed, None)
    try:
        refs = api.generate_suite_file(suite, out, cfg)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint="--suite") from e
    console.print(f"[green]{len(refs)} tasks[/green] written to {out}")


@app.command()
def train(
    suite: Path = typer.Option(..., "--suite", help="Suite JSONL file"),
    out: Path = typer.Option(..., "--out", help="Run directory"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    backend: Optional[str] = BackendOption,
    mode: Optional[str] = typer.Option(None, "--mode", help="Loss mode: dpo or ce"),
    noise: Optional[float] = typer.Option(None, "--noise", help="Visual noise rate during training rollouts"),
    resume: bool = typer.Option(False, "--resume", help="Continue from the trainer state in --out"),
) -> None:
    """Run the co-training trial loop on a suite."""
    cfg = _setup(config, seed, backend)
    trainer = cfg.setdefault("trainer", {})
    if mode is not None:
        trainer["loss_mode"] = mode
    if noise is not None:
        trainer["train_noise"] = noise
    try:
        reports, _ = api.train(cfg, _require(suite, "--suite"), out, resume=resume)
    except ValueError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(code=1) from e
    frame = reports_frame(reports)
    _emit(frame, out, "trial_reports")
    _show(frame, f"Training on {suite.name}")


@app.command("eval")
def eval_(
    checkpoint: Path = typer.Argument(..., help="policy.npz or a run directory"),
    suite: Path = typer.Option(..., "--suite", help="Suite JSONL file"),
    noise: float = typer.Option(0.0, "--noise", help="Noise rate in [0, 1]"),
    channel: Optional[str] = typer.Option(None, "--channel", help="Noise channel: visual, textual or both"),
    seeds: int = typer.Option(1, "--seeds", help="Noise seeds per task"),
    out: Path = typer.Option(Path("eval"), "--out", help="Output directory"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    backend: Optional[str] = BackendOption,
) -> None:
    """Greedy evaluation of a checkpoint."""
    cfg = _setup(config, seed, backend)
    if channel is not None and channel not in CHANNELS:
        raise typer.BadParameter(f"{channel!r} is not one of {', '.join(CHANNELS)}", param_hint="--channel")
    try:
        report = api.evaluate_checkpoint(
            _require(checkpoint, "CHECKPOINT"), _require(suite, "--suite"), cfg,
            noise_rate=noise, channel=channel, seeds=seeds,
        )
    except SchemaMismatchError as e:
        console.print(f"[red]Checkpoint does not match this executor:[/red] {e}")
        raise typer.Exit(code=1) from e
    _show(_write_eval([report], out, "eval"), f"Evaluation of {checkpoint}")


@app.command()
def sweep(
    checkpoint: Path = typer.Argument(..., help="policy.npz or a run directory"),
    suite: Path = typer.Option(..., "--suite", help="Suite JSONL file"),
    noise: Optional[List[float]] = typer.Option(None, "--noise", help="Noise rate; repeat for several"),
    channel: Optional[str] = typer.Option(None, "--channel", help="Noise channel: visual, textual or both"),
    seeds: Optional[int] = typer.Option(None, "--seeds", help="Noise seeds per task"),
    out: Path = typer.Option(Path("sweep"), "--out", help="Output directory"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    backend: Optional[str] = BackendOption,
) -> None:
    """Evaluate a checkpoint at a series of noise rates."""
    cfg = _setup(config, seed, backend)
    try:
        reports = api.sweep_checkpoint(
            _require(checkpoint, "CHECKPOINT"), _require(suite, "--suite"), cfg,
            rates=noise or None, channel=channel, seeds=seeds,
        )
    except SchemaMismatchError as e:
        console.print(f"[red]Checkpoint does not match this executor:[/red] {e}")
        raise typer.Exit(code=1) from e
    _show(_write_eval(reports, out, "sweep"), "Noise sweep")


@app.command()
def ablate(
    mode: str = typer.Option(..., "--mode", help="Ablation: no-replan or ce-loss"),
    suite: Path = typer.Option(..., "--suite", help="Suite JSONL file"),
    out: Path = typer.Option(Path("ablation"), "--out", help="Output directory"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    backend: Optional[str] = BackendOption,
) -> None:
    """Matched-seed runs of the full method and one ablation."""
    cfg = _setup(config, seed, backend)
    try:
        table = api.ablate(mode, cfg, _require(suite, "--suite"), output_dir=out)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint="--mode") from e
    _emit(table, out, f"ablation_{mode}")
    _show(table, f"Ablation: {mode}")


@app.command()
def errors(
    run_dir: Path = typer.Argument(..., help="Run directory written by train"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults to the run directory"),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Planner errors per trial, split into seen and OOD tasks."""
    _setup(config, None, None)
    try:
        table = api.planner_error_table(run_dir)
    except FileNotFoundError as e:
        console.print(f"[red]Error:[/red] {e}")
        raise typer.Exit(code=1) from e
    _emit(table, out or run_dir, "planner_errors")
    _show(table, "Planner errors")


if __name__ == "__main__":
    app()
