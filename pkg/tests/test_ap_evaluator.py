#!/usr/bin/env python3
"""
Tests for average precision, CoV^-1 summaries and the experiment matrix
"""

import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from laf.ap_evaluator import (
    AggregationMode,
    ExperimentMatrix,
    Provenance,
    average_precision,
    cov_summary,
    cross_matrix,
    evaluate_checkpoint,
    score_dataset,
)
from laf.errors import DegenerateVarianceError, InvalidArgumentError, UndefinedMetricError
from laf.synthetic_faces import LabeledDataset

OURS_SYNTHETIC = [100.00, 97.06, 87.82, 89.19, 99.77, 81.15, 76.22]


def assert_published(summary, mean, std, inv_cov):
    """Published summaries carry two decimals"""
    assert summary.mean == pytest.approx(mean, abs=0.01)
    assert summary.std == pytest.approx(std, abs=0.01)
    assert summary.inv_cov == pytest.approx(inv_cov, abs=0.01)


def pessimistic_ap(scores, labels):
    """Brute force: precision at every positive, with tied negatives counted ahead of it"""
    n = len(scores)
    precisions = []
    for j in range(n):
        if labels[j] != 1:
            continue
        ahead = tp = 0
        for i in range(n):
            before = scores[i] > scores[j] or (
                scores[i] == scores[j] and (labels[i] == 0 or i <= j))
            if before:
                ahead += 1
                tp += labels[i]
        precisions.append(tp / ahead)
    return sum(precisions) / len(precisions)


def labelings(n):
    for labels in itertools.product((0, 1), repeat=n):
        if 0 < sum(labels) < n:
            yield list(labels)


# =============================================================================
# AVERAGE PRECISION
# =============================================================================

def test_perfect_and_alternating_rankings():
    scores = [0.9, 0.8, 0.7, 0.6]
    assert average_precision(scores, [1, 1, 0, 0]).value == 1.0
    assert average_precision(scores, [0, 1, 0, 1]).value == pytest.approx(0.5, abs=1e-12)
    score = average_precision(scores, [0, 1, 0, 1])
    assert (score.n_pos, score.n_neg) == (2, 2)
    assert score.percent == pytest.approx(50.0)


def test_every_distinct_score_ranking_up_to_eight():
    # with distinct scores AP depends only on the label sequence in rank order
    for n in range(2, 9):
        scores = list(range(n, 0, -1))
        for labels in labelings(n):
            expected = pessimistic_ap(scores, labels)
            assert average_precision(scores, labels).value == pytest.approx(expected, abs=1e-9)


def test_every_tied_score_pattern_up_to_six():
    for n in range(2, 7):
        for scores in itertools.product((0.0, 1.0, 2.0), repeat=n):
            for labels in labelings(n):
                expected = pessimistic_ap(scores, labels)
                assert average_precision(scores, labels).value == pytest.approx(expected, abs=1e-9)


def test_random_tied_scores_at_seven_and_eight():
    rng = np.random.default_rng(8)
    for _ in range(2000):
        n = int(rng.integers(7, 9))
        labels = [int(v) for v in rng.integers(0, 2, size=n)]
        if not 0 < sum(labels) < n:
            continue
        scores = [float(v) for v in rng.integers(0, 3, size=n)]
        assert average_precision(scores, labels).value == pytest.approx(pessimistic_ap(scores, labels), abs=1e-9)


def test_all_tied_scores_put_negatives_first():
    value = average_precision([0.0] * 8, [0, 1] * 4).value
    assert value == pytest.approx(np.mean([k / (4 + k) for k in range(1, 5)]), abs=1e-12)


def test_matches_sklearn_without_ties():
    rng = np.random.default_rng(100)
    for _ in range(1000):
        labels = rng.integers(0, 2, size=100)
        labels[:2] = (0, 1)
        scores = rng.permutation(100).astype(np.float64) + rng.uniform(0.0, 0.5)
        expected = average_precision_score(labels, scores)
        assert average_precision(scores, labels).value == pytest.approx(expected, abs=1e-9)


def test_random_scores_approach_prevalence():
    rng = np.random.default_rng(5)
    n, n_pos = 1000, 300
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    values = [average_precision(rng.uniform(size=n), labels).value for _ in range(500)]
    assert np.mean(values) == pytest.approx(n_pos / n, abs=0.02)


def test_invalid_inputs():
    with pytest.raises(InvalidArgumentError):
        average_precision([0.1, 0.2], [0, 1, 1])
    with pytest.raises(InvalidArgumentError):
        average_precision([0.1, math.nan], [0, 1])
    with pytest.raises(InvalidArgumentError):
        average_precision([0.1, 0.2], [0, 2])
    with pytest.raises(UndefinedMetricError):
        average_precision([0.1, 0.2, 0.3], [1, 1, 1])
    with pytest.raises(UndefinedMetricError):
        average_precision([], [])


# =============================================================================
# CoV^-1
# =============================================================================

def test_exclude_train_column_summary():
    summary = cov_summary(OURS_SYNTHETIC, AggregationMode.EXCLUDE_TRAIN_COLUMN, train_index=0)
    assert_published(summary, 88.54, 8.23, 10.76)
    assert summary.n_values == 6


def test_include_all_summary():
    summary = cov_summary(OURS_SYNTHETIC, AggregationMode.INCLUDE_ALL)
    assert summary.n_values == 7
    assert summary.mean == pytest.approx(np.mean(OURS_SYNTHETIC))
    assert summary.inv_cov == pytest.approx(summary.mean / summary.std)


def test_matches_two_pass_oracle():
    rng = np.random.default_rng(12)
    for _ in range(500):
        values = list(rng.uniform(40.0, 100.0, size=int(rng.integers(2, 17))))
        mean = sum(values) / len(values)
        variance = sum((v - mean) ** 2 for v in values) / len(values)
        summary = cov_summary(values, AggregationMode.INCLUDE_ALL)
        assert summary.mean == pytest.approx(mean, abs=1e-9)
        assert summary.std == pytest.approx(math.sqrt(variance), abs=1e-9)
        assert summary.inv_cov == pytest.approx(mean / math.sqrt(variance), abs=1e-9)


def test_equal_values_are_degenerate():
    with pytest.raises(DegenerateVarianceError):
        cov_summary([80.0, 80.0, 80.0], AggregationMode.INCLUDE_ALL)
    with pytest.raises(DegenerateVarianceError):
        cov_summary([50.0, 80.0, 80.0], AggregationMode.EXCLUDE_TRAIN_COLUMN, train_index=0)


def test_train_index_rules():
    with pytest.raises(InvalidArgumentError):
        cov_summary(OURS_SYNTHETIC, AggregationMode.EXCLUDE_TRAIN_COLUMN)
    with pytest.raises(InvalidArgumentError):
        cov_summary(OURS_SYNTHETIC, AggregationMode.EXCLUDE_TRAIN_COLUMN, train_index=7)
    with pytest.raises(InvalidArgumentError):
        cov_summary(OURS_SYNTHETIC, AggregationMode.INCLUDE_ALL, train_index=0)
    with pytest.raises(InvalidArgumentError):
        cov_summary([90.0, 80.0], AggregationMode.EXCLUDE_TRAIN_COLUMN, train_index=1)
    with pytest.raises(InvalidArgumentError):
        cov_summary([90.0, math.nan], AggregationMode.INCLUDE_ALL)


# =============================================================================
# EXPERIMENT MATRIX
# =============================================================================

def sample_matrix():
    values = [[99.0, 70.0, 80.0], [60.0, 98.0, 75.0]]
    return ExperimentMatrix.filled(["a", "b"], ["a", "b", "c"], values, Provenance.FIXTURE)


def test_matrix_summaries():
    matrix = sample_matrix()
    excluded = matrix.summaries(AggregationMode.EXCLUDE_TRAIN_COLUMN)
    assert excluded["a"].mean == pytest.approx(75.0)
    assert excluded["b"].mean == pytest.approx(67.5)
    assert matrix.summaries(AggregationMode.INCLUDE_ALL)["a"].n_values == 3
    assert matrix.cell("b", "c") == 75.0


def test_matrix_summaries_skip_undefined_rows():
    matrix = ExperimentMatrix.filled(["a", "b"], ["a", "b"], [[99.0, 70.0], [80.0, 80.0]], Provenance.MEASURED)
    with pytest.raises(DegenerateVarianceError):
        matrix.summaries(AggregationMode.INCLUDE_ALL)
    assert list(matrix.summaries(AggregationMode.INCLUDE_ALL, skip_errors=True)) == ["a"]

    extra = ExperimentMatrix.filled(["z"], ["a", "b", "c"], [[90.0, 80.0, 70.0]], Provenance.MEASURED)
    with pytest.raises(InvalidArgumentError):
        extra.summaries(AggregationMode.EXCLUDE_TRAIN_COLUMN)
    assert extra.summaries(AggregationMode.EXCLUDE_TRAIN_COLUMN, skip_errors=True) == {}


def test_matrix_dict_round_trip():
    matrix = sample_matrix()
    matrix.ap[1, 2] = np.nan
    matrix.provenance[1][2] = Provenance.FAILED
    matrix.failures[("b", "c")] = "UndefinedMetricError: no positives"
    restored = ExperimentMatrix.from_dict(matrix.to_dict())
    assert restored.rows == matrix.rows and restored.cols == matrix.cols
    assert np.array_equal(restored.ap, matrix.ap, equal_nan=True)
    assert restored.provenance == matrix.provenance
    assert restored.failures == matrix.failures
    assert matrix.to_dict()["ap"][1][2] is None


def test_matrix_validation():
    with pytest.raises(InvalidArgumentError):
        ExperimentMatrix.filled(["a"], ["a", "b"], [[1.0, 2.0, 3.0]], Provenance.MEASURED)
    with pytest.raises(InvalidArgumentError):
        ExperimentMatrix.filled(["a"], ["a", "b"], [[1.0, 120.0]], Provenance.MEASURED)


def test_matrix_frame():
    frame = sample_matrix().to_frame()
    assert frame.index.name == "train_source"
    assert list(frame.columns) == ["a", "b", "c"]
    assert frame.loc["a", "c"] == 80.0


# =============================================================================
# SCORING
# =============================================================================

def test_one_cell_matrix_equals_direct_ap(model_factory, dataset_factory):
    model = model_factory(seed=2)
    dataset = dataset_factory(6, seed=3)
    direct = average_precision(score_dataset(model, dataset), dataset.labels())
    matrix = cross_matrix({"local_blend": model}, {"local_blend": dataset})
    assert matrix.shape == (1, 1)
    assert matrix.cell("local_blend", "local_blend") == pytest.approx(direct.percent, abs=1e-12)
    assert evaluate_checkpoint(model, dataset) == direct
    assert matrix.provenance == [[Provenance.MEASURED]]


def test_score_dataset_restores_training_mode(model_factory, dataset_factory):
    model = model_factory(seed=2).train()
    logits = score_dataset(model, dataset_factory(3), batch_size=4)
    assert logits.shape == (6,) and logits.dtype == np.float64
    assert model.training


def test_failed_cells_are_recorded(model_factory, dataset_factory):
    model = model_factory(seed=1)
    good = dataset_factory(4, seed=1)
    reals = LabeledDataset(good.spec, [item for item in good.items if item.label == 0])
    small = dataset_factory(2, size=8)
    matrix = cross_matrix({"m": model}, {"good": good, "reals": reals, "small": small})
    assert not math.isnan(matrix.cell("m", "good"))
    assert math.isnan(matrix.cell("m", "reals")) and math.isnan(matrix.cell("m", "small"))
    assert matrix.provenance[0] == [Provenance.MEASURED, Provenance.FAILED, Provenance.FAILED]
    assert matrix.failures[("m", "reals")].startswith("UndefinedMetricError")
    assert matrix.failures[("m", "small")].startswith("ConfigMismatchError")
    assert matrix.has_failures()


def test_parallel_matrix_matches_serial(model_factory, dataset_factory):
    models = {f"m{i}": model_factory(seed=i) for i in range(2)}
    datasets = {f"d{i}": dataset_factory(3, seed=10 + i) for i in range(3)}
    serial = cross_matrix(models, datasets)
    parallel = cross_matrix(models, datasets, max_workers=3)
    assert np.array_equal(serial.ap, parallel.ap)
