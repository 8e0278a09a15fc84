#!/usr/bin/env python3
"""
Tests for run config loading, merging and validation
"""

import json

import pytest
import yaml

from laf.ap_evaluator import AggregationMode
from laf.errors import ConfigError
from laf.layer_analysis import RankingCriterion
from laf.model_trainer import OptimizerKind
from laf.settings import (
    DEFAULT_CONFIG_PATH,
    DEFAULT_SETTINGS,
    RunConfig,
    build_run_config,
    load_run_config,
    merge_settings,
)
from laf.synthetic_faces import FamilyId


def write_yaml(tmp_path, document, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(document))
    return path


def test_shipped_config_matches_defaults():
    with open(DEFAULT_CONFIG_PATH) as f:
        assert json.load(f) == DEFAULT_SETTINGS
    assert load_run_config(DEFAULT_CONFIG_PATH, env={}) == load_run_config(env={})


def test_defaults():
    config = load_run_config(env={})
    assert config == RunConfig()
    assert config.data.families == (FamilyId.LOCAL_BLEND, FamilyId.GRID_ARTIFACT,
                                    FamilyId.EYE_TEXTURE, FamilyId.COLOR_SHIFT)
    assert config.train.optimizer is OptimizerKind.ADAM
    assert config.eval.modes == (AggregationMode.INCLUDE_ALL, AggregationMode.EXCLUDE_TRAIN_COLUMN)
    assert config.analysis.criterion is RankingCriterion.MEAN_ABS_CONTRIBUTION
    model = config.model_config()
    assert model.backbone.L == 8 and model.backbone.input_size == 256


def test_partial_yaml_merges_over_defaults(tmp_path):
    path = write_yaml(tmp_path, {"train": {"epochs": 3}, "analysis": {"trim_n": [2]}})
    config = load_run_config(path, env={})
    assert config.train.epochs == 3
    assert config.train.batch_size == 32
    assert config.analysis.trim_n == (2,)
    assert config.data == RunConfig().data


def test_json_documents_load_too(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"data": {"seed": 9}}))
    assert load_run_config(path, env={}).data.seed == 9


def test_seed_environment_override(tmp_path):
    path = write_yaml(tmp_path, {"data": {"seed": 1}, "train": {"seed": 2}})
    config = load_run_config(path, env={"LAF_SEED": "17"})
    assert config.data.seed == 17 and config.train.seed == 17
    assert load_run_config(path, env={"LAF_SEED": ""}).data.seed == 1
    with pytest.raises(ConfigError):
        load_run_config(env={"LAF_SEED": "seven"})


@pytest.mark.parametrize("document", [
    {"training": {"epochs": 3}},
    {"train": {"epoch": 3}},
    {"train": 3},
    [1, 2],
])
def test_unknown_keys_are_rejected(document):
    with pytest.raises(ConfigError):
        merge_settings(document)


@pytest.mark.parametrize("section,values", [
    ("data", {"families": []}),
    ("data", {"families": ["none"]}),
    ("data", {"families": ["warped"]}),
    ("data", {"train_pairs": 0}),
    ("data", {"margins": [0.1]}),
    ("model", {"channels": [4, 4], "strides": [2]}),
    ("model", {"hidden_dims": [8]}),
    ("train", {"optimizer": "rmsprop"}),
    ("train", {"learning_rate": -1.0}),
    ("eval", {"modes": []}),
    ("analysis", {"criterion": "random"}),
    ("analysis", {"trim_n": [9]}),
    ("analysis", {"cam_k": 0}),
])
def test_invalid_values_are_config_errors(section, values):
    with pytest.raises(ConfigError):
        build_run_config(merge_settings({section: values}))


def test_batch_norm_must_be_a_boolean(tmp_path):
    for value in ("false", 0, 1, None):
        with pytest.raises(ConfigError):
            build_run_config(merge_settings({"model": {"batch_norm": value}}))
    path = write_yaml(tmp_path, {"model": {"batch_norm": False}})
    assert load_run_config(path, env={}).model.batch_norm is False


def test_unparsable_document(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("train: [epochs: 3\n")
    with pytest.raises(ConfigError):
        load_run_config(path, env={})


def test_to_dict_round_trip(mini_config):
    assert build_run_config(merge_settings(mini_config.to_dict())) == mini_config
    assert RunConfig().to_dict() == DEFAULT_SETTINGS
