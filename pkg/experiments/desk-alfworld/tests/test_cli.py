"""
Tests for the coplan command line.

This module tests:
1. Suite generation
2. Evaluation of a saved checkpoint, including schema mismatches
3. The planner error table
"""

import json

import numpy as np
from typer.testing import CliRunner

from coplan.cli import app
from coplan.executor import AGREEMENT_FEATURES, PolicyParams, save_checkpoint

runner = CliRunner()

SMALL = "suites:\n  seen_per_type: 1\nexecutor:\n  window: 3\ntrainer:\n  max_workers: 1\n"


def write_follower(path, window=3):
    params = PolicyParams.zeros(window)
    agreement = params.agreement.copy()
    agreement[AGREEMENT_FEATURES.index("exact")] = 20.0
    save_checkpoint(params.unflat(np.concatenate([params.weights.ravel(), params.bias, agreement])), path, window=window)


def test_gen_writes_suite(tmp_path):
    out = tmp_path / "ood.jsonl"
    result = runner.invoke(app, ["gen", "--suite", "ood", "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = out.read_text().splitlines()
    assert len(lines) == 134
    assert all(json.loads(line)["ood"] for line in lines)


def test_gen_rejects_unknown_suite(tmp_path):
    result = runner.invoke(app, ["gen", "--suite", "unseen", "--out", str(tmp_path / "x.jsonl")])
    assert result.exit_code == 2
    assert not (tmp_path / "x.jsonl").exists()


def test_bad_config_is_a_usage_error(tmp_path):
    result = runner.invoke(app, ["gen", "--out", str(tmp_path / "x.jsonl"), "--config", str(tmp_path / "none.yaml")])
    assert result.exit_code == 2


def test_eval_checkpoint(tmp_path):
    config = tmp_path / "small.yaml"
    config.write_text(SMALL)
    suite = tmp_path / "seen.jsonl"
    assert runner.invoke(app, ["gen", "--out", str(suite), "--config", str(config)]).exit_code == 0
    checkpoint = tmp_path / "policy.npz"
    write_follower(checkpoint)

    out = tmp_path / "eval"
    result = runner.invoke(app, ["eval", str(checkpoint), "--suite", str(suite), "--out", str(out), "--config", str(config)])
    assert result.exit_code == 0, result.output
    rows = json.loads((out / "eval.json").read_text())
    assert rows[0]["Avg"] == 1.0
    reports = json.loads((out / "eval_reports.json").read_text())
    assert reports[0]["episodes"] == 6

    result = runner.invoke(app, ["eval", str(checkpoint), "--suite", str(suite), "--out", str(out)])
    assert result.exit_code == 1, "the default window does not match the checkpoint"

    result = runner.invoke(app, ["eval", str(checkpoint), "--suite", str(suite), "--channel", "audio", "--config", str(config)])
    assert result.exit_code == 2


def test_errors_table(tmp_path):
    run = tmp_path / "run"
    (run / "trial_00").mkdir(parents=True)
    (run / "trial_00" / "report.json").write_text(json.dumps({
        "trial": 0, "parse_failures": 1, "no_progress": 0, "failed_plans": 1, "planner_errors": 2,
        "task_errors": {"look-seen-4": 1, "look-ood-1000090": 1},
    }))
    result = runner.invoke(app, ["errors", str(run)])
    assert result.exit_code == 0, result.output
    rows = json.loads((run / "planner_errors.json").read_text())
    assert rows == [{
        "trial": 0, "errors_seen": 1, "errors_ood": 1, "parse_failures": 1,
        "no_progress": 0, "failed_plans": 1, "total": 2,
    }]
    assert runner.invoke(app, ["errors", str(tmp_path / "missing")]).exit_code == 1
