"""Tests for experiment config loading, environment overrides and validation."""

import json
import sys
from pathlib import Path

import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import (
    ENV_OUT_DIR,
    ENV_SEED,
    FANN,
    IDENTITY,
    ExperimentConfig,
    apply_env,
    experiment_from_dict,
    load_experiment,
    validate_experiment,
)
from core.augment import AugmentPlan
from core.datl import AdaptationConfig
from core.errors import ConfigError
from core.synth import BandGrid

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def _minimal(**blocks) -> dict:
    data = {"model": {"config": "input-48 → fc-8 → softmax-6"}}
    data.update(blocks)
    return data


def _field_of(data: dict) -> str:
    with pytest.raises(ConfigError) as excinfo:
        validate_experiment(experiment_from_dict(data))
    return excinfo.value.field


class TestFromDict:
    """Building typed configs from JSON objects."""

    def test_defaults(self):
        cfg = experiment_from_dict({})
        assert isinstance(cfg, ExperimentConfig)
        assert cfg.trainer.mode == "supervised"
        assert cfg.report.seeds == [0]
        assert isinstance(cfg.augment, AugmentPlan)

    def test_nested_blocks(self):
        cfg = experiment_from_dict({
            "dataset": {"synth": {"n_classes": 4, "source_grid": {"start_nm": 450, "stop_nm": 950, "bands": 20}}},
            "trainer": {"mode": "fann", "train": {"epochs": 3, "adaptation": {"beta_mode": "fixed", "beta": 0.2}}},
        })
        assert cfg.dataset.synth.n_classes == 4
        assert cfg.dataset.synth.source_grid == BandGrid(450, 950, 20)
        assert isinstance(cfg.trainer.train.adaptation, AdaptationConfig)
        assert cfg.trainer.train.adaptation.beta == 0.2

    @pytest.mark.parametrize("data, field", [
        ({"colour": 1}, "experiment.colour"),
        ({"trainer": {"train": {"epochz": 3}}}, "trainer.train.epochz"),
        ({"dataset": {"synth": {"source_grid": {"nm": 1}}}}, "dataset.synth.source_grid.nm"),
        ({"trainer": {"train": {"adaptation": {"mode": "pad"}}}}, "trainer.train.adaptation.mode"),
        ({"active": {"strategy": "bald", "rounds": 3}}, "active.rounds"),
    ])
    def test_unknown_keys(self, data, field):
        with pytest.raises(ConfigError) as excinfo:
            experiment_from_dict(data)
        assert excinfo.value.field == field

    def test_block_must_be_object(self):
        with pytest.raises(ConfigError) as excinfo:
            experiment_from_dict({"split": [1, 2]})
        assert excinfo.value.field == "split"

    def test_round_trip_through_dict(self):
        cfg = experiment_from_dict(_minimal(trainer={"mode": "plssdl", "train": {"freeze_depth": 1}}))
        again = experiment_from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()


class TestEnvironment:
    """HSIADAPT_* overrides."""

    def test_overrides(self):
        cfg = apply_env(experiment_from_dict({}), {ENV_OUT_DIR: "/tmp/elsewhere", ENV_SEED: "7"})
        assert cfg.report.out_dir == "/tmp/elsewhere"
        assert cfg.report.seeds == [7]

    def test_empty_values_ignored(self):
        cfg = apply_env(experiment_from_dict({}), {ENV_OUT_DIR: "", ENV_SEED: ""})
        assert cfg.report.out_dir == "runs/default"

    def test_bad_seed(self):
        with pytest.raises(ConfigError) as excinfo:
            apply_env(experiment_from_dict({}), {ENV_SEED: "seven"})
        assert excinfo.value.field == ENV_SEED


class TestLoadExperiment:
    """Reading config files."""

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_experiment(path)

    def test_env_applied_before_validation(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(_minimal()), encoding="utf-8")
        cfg = load_experiment(path, environ={ENV_SEED: "3"})
        assert cfg.report.seeds == [3]

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
    def test_shipped_configs_validate(self, path):
        cfg = load_experiment(path, environ={})
        assert cfg.name


class TestValidation:
    """Invalid values name the offending field."""

    def test_minimal_is_valid(self):
        validate_experiment(experiment_from_dict(_minimal()))

    def test_unknown_mode(self):
        assert _field_of(_minimal(trainer={"mode": "magic"})) == "trainer.mode"

    def test_missing_model_config(self):
        assert _field_of({}) == "model.config"

    def test_bad_grammar(self):
        assert _field_of({"model": {"config": "input-48 → wobble-3"}}) == "model.config"

    def test_even_window(self):
        assert _field_of(_minimal(model={"config": "input-48 → fc-8 → softmax-6", "window": 4})) == "model.window"

    def test_dropout_range(self):
        assert _field_of(_minimal(model={"config": "input-48 → fc-8 → softmax-6", "dropout": 1.0})) == "model.dropout"

    def test_fann_needs_branches(self):
        data = {"trainer": {"mode": FANN}, "model": {"source_config": "input-64 → conv3-4"}}
        assert _field_of(data) == "model.target_config"

    def test_fann_config_text(self):
        data = {"trainer": {"mode": FANN},
                "model": {"fann_config": "conv3-8 → DATL ← conv3-8\nrecur-4 → DATL ← recur-4\nfully connected-6"}}
        validate_experiment(experiment_from_dict(data))

    def test_fann_config_bad_row(self):
        data = {"trainer": {"mode": FANN}, "model": {"fann_config": "conv3-8 => conv3-8\nfc-6"}}
        assert _field_of(data) == "model.fann_config"

    def test_trainer_values(self):
        assert _field_of(_minimal(trainer={"train": {"learning_rate": -1}})) == "trainer.train"

    def test_augment_values(self):
        assert _field_of(_minimal(augment={"scale_range": [1.2, 0.8]})) == "augment"

    def test_split_per_class(self):
        assert _field_of(_minimal(split={"per_class": 0})) == "split.per_class"

    def test_active_budget_below_step(self):
        assert _field_of(_minimal(active={"budget": 5, "step": 10})) == "active.budget"

    def test_active_strategy(self):
        assert _field_of(_minimal(active={"strategy": "margin"})) == "active.strategy"

    def test_pool_must_exceed_initial(self):
        assert _field_of(_minimal(active={"initial_per_class": 5, "pool_per_class": 5})) == "active.pool_per_class"

    def test_empty_seeds(self):
        assert _field_of(_minimal(report={"seeds": []})) == "report.seeds"

    def test_synth_grid_outside_source(self):
        data = _minimal(dataset={"synth": {"target_grid": {"start_nm": 300, "stop_nm": 900, "bands": 10}}})
        assert _field_of(data) == "dataset.synth"

    def test_identity_shift_ignores_target_grid(self):
        data = _minimal(dataset={"shift": IDENTITY,
                                 "synth": {"target_grid": {"start_nm": 300, "stop_nm": 900, "bands": 10}}})
        cfg = experiment_from_dict(data)
        validate_experiment(cfg)
        assert cfg.dataset.synth_config().target_grid == cfg.dataset.synth.source_grid

    def test_unknown_shift(self):
        assert _field_of(_minimal(dataset={"shift": "sideways"})) == "dataset.shift"

    def test_file_dataset_needs_paths(self):
        assert _field_of(_minimal(dataset={"kind": "files"})) == "dataset.source_header"

    def test_file_dataset_missing_file(self, tmp_path):
        data = _minimal(dataset={"kind": "files", "source_header": str(tmp_path / "x.hdr")})
        assert _field_of(data) == "dataset.source_header"

    def test_unknown_descriptor(self, tmp_path):
        paths = {}
        for name in ("source_header", "source_labels", "target_header", "target_labels"):
            path = tmp_path / name
            path.write_text("", encoding="utf-8")
            paths[name] = str(path)
        data = _minimal(dataset={"kind": "files", "source_descriptor": "mars", **paths})
        assert _field_of(data) == "dataset.source_descriptor"
