#!/usr/bin/env python3
"""
AP Evaluator
Average precision, CoV^-1 ranking and the cross-source experiment matrix

AP is the step-wise sum of ΔRecall·Precision over descending scores, with
positives = label 1. At equal scores negatives are ranked before positives
(pessimistic), then input order.

CoV^-1 = mean AP / population std of AP, over either every test source
(INCLUDE_ALL) or every source except the one the model was trained on
(EXCLUDE_TRAIN_COLUMN).
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from laf.aggregation_model import AggregationModel, images_to_tensor
from laf.errors import (
    ConfigMismatchError,
    DegenerateVarianceError,
    InvalidArgumentError,
    LafError,
    UndefinedMetricError,
)
from laf.synthetic_faces import LabeledDataset

logger = logging.getLogger(__name__)

SCORE_BATCH_SIZE = 64


class AggregationMode(Enum):
    INCLUDE_ALL = "include_all"
    EXCLUDE_TRAIN_COLUMN = "exclude_train_column"


class Provenance(Enum):
    MEASURED = "measured"
    FIXTURE = "fixture"
    FAILED = "failed"


# =============================================================================
# AVERAGE PRECISION
# =============================================================================

@dataclass(frozen=True)
class APScore:
    value: float  # in [0, 1]
    n_pos: int
    n_neg: int

    @property
    def percent(self) -> float:
        return 100.0 * self.value


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> APScore:
    """
    Non-interpolated average precision.

    Args:
        scores: higher means "more likely label 1"
        labels: 0 or 1 per score

    Raises:
        InvalidArgumentError: length mismatch, NaN score or label outside {0, 1}
        UndefinedMetricError: fewer than two classes present
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InvalidArgumentError(f"{s.size} scores but {y.size} labels")
    if np.isnan(s).any():
        raise InvalidArgumentError("scores contain NaN")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgumentError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AP needs both classes, got {n_pos} positives and {n_neg} negatives")

    # primary key last: score descending, then negatives first, then input order
    order = np.lexsort((np.arange(y.size), y, -s))
    ranked = y[order]
    precision = np.cumsum(ranked) / np.arange(1, y.size + 1)
    value = float(precision[ranked == 1].sum() / n_pos)
    return APScore(value, n_pos, n_neg)


# =============================================================================
# CoV^-1
# =============================================================================

@dataclass(frozen=True)
class CoVSummary:
    mean: float
    std: float
    inv_cov: float
    mode: AggregationMode
    n_values: int

    def rounded(self, digits: int = 2) -> Dict[str, float]:
        return {
            "mean": round(self.mean, digits),
            "std": round(self.std, digits),
            "inv_cov": round(self.inv_cov, digits),
        }

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "inv_cov": self.inv_cov,
            "mode": self.mode.value,
            "n_values": self.n_values,
        }


def cov_summary(ap_values: Sequence[float], mode: AggregationMode,
                train_index: Optional[int] = None) -> CoVSummary:
    """
    Mean, population std and CoV^-1 of a row of AP values (percent).

    Args:
        ap_values: one AP per test source
        mode: which values enter the statistics
        train_index: column of the training source; required iff mode is EXCLUDE_TRAIN_COLUMN
    """
    values = np.asarray(ap_values, dtype=np.float64).ravel()
    if np.isnan(values).any():
        raise InvalidArgumentError("AP values contain NaN")
    if mode is AggregationMode.EXCLUDE_TRAIN_COLUMN:
        if train_index is None or not 0 <= train_index < values.size:
            raise InvalidArgumentError(f"train_index must be in [0, {values.size}) for {mode.value}")
        values = np.delete(values, train_index)
    elif train_index is not None:
        raise InvalidArgumentError(f"train_index is only meaningful for {AggregationMode.EXCLUDE_TRAIN_COLUMN.value}")
    if values.size < 2:
        raise InvalidArgumentError(f"need at least 2 AP values after filtering, got {values.size}")

    mean = float(np.mean(values))
    std = float(np.std(values))
    if std <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateVarianceError(f"all {values.size} AP values equal {mean:.4f}; CoV^-1 undefined")
    return CoVSummary(mean, std, mean / std, mode, int(values.size))


# =============================================================================
# EXPERIMENT MATRIX
# =============================================================================

@dataclass
class ExperimentMatrix:
    """AP (percent) of every train source (row) on every test source (column)"""
    rows: List[str]
    cols: List[str]
    ap: np.ndarray
    provenance: List[List[Provenance]]
    failures: Dict[Tuple[str, str], str] = field(default_factory=dict)

    def __post_init__(self):
        self.ap = np.asarray(self.ap, dtype=np.float64)
        if self.ap.shape != (len(self.rows), len(self.cols)):
            raise InvalidArgumentError(
                f"matrix of shape {self.ap.shape} does not match {len(self.rows)} rows × {len(self.cols)} cols")
        if len(self.provenance) != len(self.rows) or any(len(p) != len(self.cols) for p in self.provenance):
            raise InvalidArgumentError("provenance grid must match the matrix shape")
        valid = self.ap[~np.isnan(self.ap)]
        if ((valid < 0) | (valid > 100)).any():
            raise InvalidArgumentError("AP cells must lie in [0, 100]")

    @classmethod
    def filled(cls, rows: Sequence[str], cols: Sequence[str], values, provenance: Provenance) -> "ExperimentMatrix":
        grid = [[provenance] * len(cols) for _ in rows]
        return cls(list(rows), list(cols), np.asarray(values, dtype=np.float64), grid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ap.shape

    def cell(self, row: str, col: str) -> float:
        return float(self.ap[self.rows.index(row), self.cols.index(col)])

    def has_failures(self) -> bool:
        return bool(self.failures)

    def summaries(self, mode: AggregationMode, skip_errors: bool = False) -> Dict[str, CoVSummary]:
        """
        CoV^-1 summary per row; EXCLUDE_TRAIN_COLUMN drops the column named like the row.

        With skip_errors, rows whose summary is undefined are logged and left out.
        """
        out = {}
        for i, row in enumerate(self.rows):
            try:
                train_index = None
                if mode is AggregationMode.EXCLUDE_TRAIN_COLUMN:
                    if row not in self.cols:
                        raise InvalidArgumentError(f"row {row!r} has no matching column to exclude")
                    train_index = self.cols.index(row)
                out[row] = cov_summary(self.ap[i], mode, train_index)
            except LafError as e:
                if not skip_errors:
                    raise
                logger.warning(f"No {mode.value} summary for {row}: {e}")
        return out

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.ap, index=self.rows, columns=self.cols)
        frame.index.name = "train_source"
        return frame

    def to_dict(self) -> Dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "ap": [[None if np.isnan(v) else float(v) for v in row] for row in self.ap],
            "provenance": [[p.value for p in row] for row in self.provenance],
            "failures": {f"{r}|{c}": msg for (r, c), msg in sorted(self.failures.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentMatrix":
        try:
            rows, cols = list(data["rows"]), list(data["cols"])
            grid = [[np.nan if v is None else float(v) for v in row] for row in data["ap"]]
            ap = np.asarray(grid, dtype=np.float64)
            provenance = [[Provenance(p) for p in row] for row in data["provenance"]]
            failures = {tuple(key.split("|", 1)): msg for key, msg in data.get("failures", {}).items()}
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise InvalidArgumentError(f"malformed experiment matrix: {e!r}") from e
        return cls(rows, cols, ap, provenance, failures)

    @classmethod
    def load(cls, path) -> "ExperimentMatrix":
        """Read a matrix written by to_dict as JSON"""
        with open(path, "r") as f:
            try:
                data = json.load(f)
            except ValueError as e:
                raise InvalidArgumentError(f"cannot parse matrix {path}: {e}") from e
        return cls.from_dict(data)


# =============================================================================
# SCORING
# =============================================================================

def score_dataset(model: AggregationModel, dataset: LabeledDataset,
                  batch_size: int = SCORE_BATCH_SIZE) -> np.ndarray:
    """Float64 logits for every item, in dataset order"""
    expected = model.config.backbone.input_size
    if len(dataset) and dataset.image_size() != expected:
        raise ConfigMismatchError(f"model expects {expected}px inputs, dataset has {dataset.image_size()}px images")
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                batch = np.stack([item.image for item in dataset.items[start:start + batch_size]])
                chunks.append(model(images_to_tensor(batch)).cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)


def evaluate_checkpoint(model: AggregationModel, dataset: LabeledDataset) -> APScore:
    """AP of a model on one dataset"""
    return average_precision(score_dataset(model, dataset), dataset.labels())


def cross_matrix(models: Mapping[str, AggregationModel], datasets: Mapping[str, LabeledDataset],
                 max_workers: int = 1) -> ExperimentMatrix:
    """
    Score every model on every test dataset.

    A failing cell is logged, stored as NaN with provenance FAILED and its
    error text kept in `failures`; the other cells still run.
    """
    rows, cols = list(models), list(datasets)
    ap = np.full((len(rows), len(cols)), np.nan)
    provenance = [[Provenance.MEASURED] * len(cols) for _ in rows]
    failures: Dict[Tuple[str, str], str] = {}
    # worker threads share the models read-only
    for model in models.values():
        model.eval()

    def run_cell(i: int, j: int) -> Union[float, Exception]:
        try:
            return evaluate_checkpoint(models[rows[i]], datasets[cols[j]]).percent
        except (LafError, RuntimeError, ValueError) as e:
            return e

    cells = [(i, j) for i in range(len(rows)) for j in range(len(cols))]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda ij: run_cell(*ij), cells))
    else:
        results = [run_cell(i, j) for i, j in cells]

    for (i, j), result in zip(cells, results):
        if isinstance(result, Exception):
            logger.warning(f"Cell ({rows[i]}, {cols[j]}) failed: {result}")
            provenance[i][j] = Provenance.FAILED
            failures[(rows[i], cols[j])] = f"{type(result).__name__}: {result}"
        else:
            ap[i, j] = result
    logger.info(f"Evaluated {len(rows)}x{len(cols)} matrix, {len(failures)} failed cells")
    return ExperimentMatrix(rows, cols, ap, provenance, failures)
