"""
Tests for model wrappers and configuration loading.

This module tests:
1. Scripted and audited models
2. Model creation from the wire configuration
3. Packaged defaults and user overrides
4. Every packaged key has a reader
"""

import json

import pytest

from coplan.api import SuiteSpec
from coplan.config import ConfigError, load_config
from coplan.models import (
    AuditedModel,
    CompletionModel,
    ScriptedModel,
    WireConfig,
    create_model_from_config,
)
from coplan.trainer import TrainerConfig
from coplan.world import WorldParams


def test_scripted_model_repeats_last_response():
    model = ScriptedModel(["first", "second"])
    assert [model.prompt(p) for p in ("a", "b", "c")] == ["first", "second", "second"]
    assert model.prompts == ["a", "b", "c"]
    assert model.call_count == 3
    echo = ScriptedModel(lambda text: text.upper())
    assert echo.prompt("go to sinkbasin 1") == "GO TO SINKBASIN 1"
    with pytest.raises(ValueError):
        ScriptedModel([])


def test_audited_model_appends_jsonl(tmp_path):
    audit = tmp_path / "audit" / "wire_audit.jsonl"
    model = AuditedModel(ScriptedModel(["> step 1: go to cabinet 1"]), audit)
    model.prompt("plan please")
    model.prompt("again")
    entries = [json.loads(line) for line in audit.read_text().splitlines()]
    assert [e["query_number"] for e in entries] == [1, 2]
    assert entries[0]["query"] == "plan please"
    assert entries[1]["response"] == "> step 1: go to cabinet 1"
    assert model.name == "audited-scripted"


def test_create_model_from_config(tmp_path):
    config = {"wire": {"provider": "scripted", "responses": ["> step 1: open fridge 1"], "audit_file": "a.jsonl"}}
    model = create_model_from_config(config)
    assert isinstance(model, ScriptedModel)
    assert model.prompt("x") == "> step 1: open fridge 1"
    audited = create_model_from_config(config, audit_dir=tmp_path)
    audited.prompt("x")
    assert (tmp_path / "a.jsonl").exists()
    with pytest.raises(ValueError):
        create_model_from_config({"wire": {"provider": "carrier-pigeon"}})


def test_completion_model_needs_a_key(monkeypatch):
    monkeypatch.delenv("COPLAN_WIRE_KEY", raising=False)
    with pytest.raises(ValueError):
        CompletionModel(WireConfig())


def test_wire_config_from_config():
    wire = WireConfig.from_config(load_config())
    assert wire.stop == ("\n\n",)
    assert wire.temperature == 0.0
    assert WireConfig.from_config(None) == WireConfig()


def test_packaged_defaults():
    config = load_config()
    assert config["trainer"]["max_trials"] == 12
    assert config["trainer"]["beta"] == 0.1
    assert config["trainer"]["memory_cap"] == 3
    assert config["world"]["horizon"] == 30
    assert "Replanned Action Sequence:" in config["prompts"]["replan"]



def fields(cls):
    return set(cls.__dataclass_fields__)


def test_every_packaged_key_has_a_reader():
    config = load_config()
    readers = {
        "world": fields(WorldParams),
        "planner": {"backend", "max_retries"},
        "wire": fields(WireConfig),
        "prompts": {"plan_header", "action_sequence", "replan", "retrospect", "next_action"},
        "executor": {"window", "temperature", "bc_epochs", "bc_lr"},
        "trainer": fields(TrainerConfig) - {"window", "temperature", "bc_epochs", "bc_lr"},
        "suites": fields(SuiteSpec),
        "evaluation": {"channel", "sweep_rates", "sweep_seeds"},
        "paths": {"processed_data", "runs"},
        "logging": {"level"},
        "experiments": {"desk_alfworld"},
    }
    assert set(config) == set(readers)
    for section, keys in readers.items():
        assert set(config[section]) <= keys, f"unread keys in {section}: {set(config[section]) - keys}"
    assert set(config["trainer"]) == readers["trainer"], "every trainer field is configurable"


def test_user_file_overrides_only_its_keys(tmp_path):
    user = tmp_path / "user.yaml"
    user.write_text("trainer:\n  max_trials: 2\nplanner:\n  backend: wire\n")
    config = load_config(user)
    assert config["trainer"]["max_trials"] == 2
    assert config["trainer"]["beta"] == 0.1, "untouched keys keep their defaults"
    assert config["planner"]["backend"] == "wire"
    assert load_config()["trainer"]["max_trials"] == 12, "the packaged file is not modified"


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("trainer: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(broken)
    listing = tmp_path / "list.yaml"
    listing.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config(listing)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == load_config()
