"""
Acceptance runs for the desk-alfworld experiment.

This script runs the whole pipeline at the scale set in the experiments
section of config.yaml:
1. Generate seen, OOD and stuck suites
2. Co-train on the seen suite
3. Evaluate the final executor on every suite, with and without noise
4. Run both ablations on the stuck suite
5. Tabulate planner errors per trial
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler

from coplan import api, load_config
from coplan.trainer import reports_frame

console = Console()
logger = logging.getLogger("coplan")


def scaled_config() -> Dict[str, Any]:
    """Packaged config with suite sizes and trial count from the experiment section."""
    config = load_config()
    experiment = config["experiments"]["desk_alfworld"]
    config["suites"].update({k: experiment[k] for k in ("seen_per_type", "ood_total", "stuck_total")})
    config["trainer"]["max_trials"] = experiment["max_trials"]
    return config


def run_experiment() -> None:
    config = scaled_config()
    experiment = config["experiments"]["desk_alfworld"]
    logging.basicConfig(
        level=config["logging"]["level"],
        format="%(message)s",
        handlers=[RichHandler(console=console)],
        force=True,
    )
    results_dir = Path(config["paths"]["processed_data"])
    runs_dir = results_dir / config["paths"]["runs"]
    suites_dir = results_dir / "suites"
    run_dir = runs_dir / "seen"

    suites = {}
    for kind in api.SUITE_KINDS:
        suites[kind] = suites_dir / f"{kind}.jsonl"
        refs = api.generate_suite_file(kind, suites[kind], config)
        console.print(f"{kind}: {len(refs)} tasks")

    reports, _ = api.train(config, suites["seen"], run_dir, resume=True)
    reports_frame(reports).to_csv(results_dir / "training_curve.csv", index=False)

    evals = []
    for kind, path in suites.items():
        for channel in ("visual", "textual"):
            for report in api.sweep_checkpoint(
                run_dir, path, config,
                rates=experiment["sweep_rates"], channel=channel, seeds=experiment["sweep_seeds"],
            ):
                row = report.row()
                row["suite"] = kind
                evals.append(row)
    eval_df = pd.DataFrame(evals)
    eval_df.to_csv(results_dir / "evaluation.csv", index=False)

    ablations = [
        api.ablate(mode, config, suites["stuck"], output_dir=runs_dir / f"ablate-{mode}")
        for mode in experiment["ablations"]
    ]
    pd.concat(ablations, ignore_index=True).to_csv(results_dir / "ablations.csv", index=False)

    errors = api.planner_error_table(run_dir)
    errors.to_csv(results_dir / "planner_errors.csv", index=False)

    clean = eval_df[(eval_df["noise_rate"] == 0.0) & (eval_df["channel"] == "visual")]
    summary = {
        "final_trial": int(reports[-1].trial_index) if reports else None,
        "success": {row["suite"]: row["Avg"] for _, row in clean.iterrows()},
        "planner_errors": int(errors["total"].sum()),
    }
    with (results_dir / "summary.json").open("w") as f:
        json.dump(summary, f, indent=2)

    console.print(f"Experiment completed! Results saved to {results_dir}")
    console.print(clean[["suite", "Avg", "Avg steps", "Avg steps-all"]].to_string(index=False))


if __name__ == "__main__":
    run_experiment()
