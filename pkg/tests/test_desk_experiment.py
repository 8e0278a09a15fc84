#!/usr/bin/env python3
"""
Desk-scale end-to-end experiment with the shipped defaults

Trains one model per manipulation family at full desk scale, so it only runs
with LAF_RUN_SLOW=1.
"""

import json
import os
from dataclasses import replace

import numpy as np
import pytest

from laf.aggregation_model import AggregationModel, ModelConfig, ProjectorConfig, projector_parameter_count
from laf.cli import run_pipeline
from laf.desknet import DEFAULT_CHANNELS
from laf.model_trainer import train
from laf.settings import load_run_config
from laf.synthetic_faces import FamilyId, Split

from conftest import build_aligned

pytestmark = pytest.mark.skipif(os.environ.get("LAF_RUN_SLOW") != "1", reason="set LAF_RUN_SLOW=1 to run")


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    config = load_run_config(env={})
    root = tmp_path_factory.mktemp("desk")
    first = run_pipeline(config, root / "first")
    run_pipeline(config, root / "second")
    return config, root, first


def test_each_family_detects_its_own_fakes(desk_runs):
    config, _, summary = desk_runs
    assert summary["families"] == [f.value for f in config.data.families]
    for family, ap in summary["diagonal_test_ap"].items():
        assert ap >= 95.0, family


def test_reports_are_emitted(desk_runs):
    _, root, _ = desk_runs
    reports = root / "first" / "reports"
    for name in ("matrix.csv", "matrix.json", "ranking_include_all.csv", "ranking_exclude_train_column.csv",
                 "importance_local_blend.csv", "trim.csv", "trim.json", "trim.png", "summary.json"):
        assert (reports / name).exists(), name


def test_three_layers_degrade_no_more_than_one(desk_runs):
    _, _, summary = desk_runs
    assert sorted(summary["trim"], key=int) == ["1", "3", "8"]
    assert summary["trim"]["3"]["ap_degradation"] <= summary["trim"]["1"]["ap_degradation"]
    assert summary["trim"]["8"]["ap_degradation"] == pytest.approx(0.0, abs=1e-9)


def test_single_layer_fraction_matches_closed_form(desk_runs):
    _, root, _ = desk_runs
    trim = json.loads((root / "first" / "reports" / "trim.json").read_text())
    projector = ModelConfig().projector
    assert projector == ProjectorConfig()
    counts = [projector_parameter_count(channels * 16, projector) for channels in DEFAULT_CHANNELS]
    full = sum(counts) + 10 * len(counts) + 1
    point = next(p for p in trim["points"] if p["n"] == 1)
    for plan in point["plans"].values():
        (layer,) = plan["selected_layers"]
        assert plan["analysis_param_count_full"] == full
        assert plan["analysis_param_count_trimmed"] == counts[layer - 1] + 11


def test_heatmaps_find_the_blended_region(desk_runs):
    _, root, summary = desk_runs
    localization = json.loads((root / "first" / "reports" / "cam_localization.json").read_text())
    assert localization["family"] == "local_blend"
    assert localization["n_scored"] >= 40
    assert summary["cam_localization_rate"] >= 0.8


def test_rerun_is_byte_identical(desk_runs):
    _, root, _ = desk_runs
    first, second = root / "first", root / "second"
    for path in sorted((first / "reports").iterdir()):
        if path.suffix in (".json", ".csv"):
            assert path.read_bytes() == (second / "reports" / path.name).read_bytes(), path.name
    for path in sorted((first / "models").iterdir()):
        assert path.read_bytes() == (second / "models" / path.name).read_bytes(), path.name


def test_first_epoch_batch_loss_trends_down():
    config = load_run_config(env={})
    train_set = build_aligned(config, FamilyId.LOCAL_BLEND, Split.TRAIN)
    val_set = build_aligned(config, FamilyId.LOCAL_BLEND, Split.VAL)
    result = train(AggregationModel(config.model_config()), train_set, val_set, replace(config.train, epochs=1))
    losses = result.history[0].batch_losses
    assert len(losses) == -(-len(train_set) // config.train.batch_size)
    assert losses[0] == pytest.approx(np.log(2.0), abs=1e-9)
    assert losses[-1] < losses[0]
    half = len(losses) // 2
    assert np.mean(losses[half:]) < np.mean(losses[:half])
