#!/usr/bin/env python3
"""
Layer Analysis
Per-layer importance profiles and importance-guided trimming of the aggregation

The importance of layer i on one image is its logit contribution c_i = w_i · p_i.
Trimming keeps the projectors of the N most important layers and their head
blocks, with no retraining; the backbone is cut after the deepest kept layer.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from matplotlib.figure import Figure

from laf.aggregation_model import AggregationModel, images_to_tensor, project_primitive
from laf.ap_evaluator import ExperimentMatrix, cross_matrix
from laf.errors import InvalidArgumentError, InvalidDatasetError
from laf.synthetic_faces import LabeledDataset

logger = logging.getLogger(__name__)


class RankingCriterion(Enum):
    MEAN_ABS_CONTRIBUTION = "mean_abs_contribution"
    CLASS_GAP = "class_gap"
    HEAD_WEIGHT_NORM = "head_weight_norm"


# =============================================================================
# IMPORTANCE
# =============================================================================

@dataclass(frozen=True)
class LayerImportance:
    layer_index: int
    mean_real: float
    mean_fake: float
    mean_abs: float = 0.0
    head_weight_norm: float = 0.0

    @property
    def class_gap(self) -> float:
        return self.mean_fake - self.mean_real


@dataclass
class ImportanceProfile:
    per_layer: List[LayerImportance]
    n_real: int
    n_fake: int
    bias: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "layer_index": e.layer_index,
                "mean_real": e.mean_real,
                "mean_fake": e.mean_fake,
                "class_gap": e.class_gap,
                "mean_abs": e.mean_abs,
                "head_weight_norm": e.head_weight_norm,
            }
            for e in sorted(self.per_layer, key=lambda e: e.layer_index)
        ])

    def to_dict(self) -> Dict:
        return {
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "bias": self.bias,
            "per_layer": self.to_frame().to_dict(orient="records"),
        }


def contributions(model: AggregationModel, dataset: LabeledDataset, batch_size: int = 64) -> np.ndarray:
    """N×L float64 matrix of c_i for every image, in dataset order"""
    was_training = model.training
    model.eval()
    rows = []
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                batch = np.stack([item.image for item in dataset.items[start:start + batch_size]])
                rows.append(model.decompose(images_to_tensor(batch)).as_numpy())
    finally:
        model.train(was_training)
    return np.concatenate(rows) if rows else np.zeros((0, model.L))


def layer_importance(model: AggregationModel, dataset: LabeledDataset, batch_size: int = 64) -> ImportanceProfile:
    """Class-wise mean contribution of every layer"""
    labels = dataset.labels()
    n_fake = int((labels == 1).sum())
    n_real = int((labels == 0).sum())
    if n_real == 0 or n_fake == 0:
        raise InvalidDatasetError(f"importance needs both classes, got {n_real} real and {n_fake} fake")

    c = contributions(model, dataset, batch_size)
    head = model.head
    per_layer = []
    for i in range(1, model.L + 1):
        column = c[:, i - 1]
        per_layer.append(LayerImportance(
            layer_index=i,
            mean_real=float(column[labels == 0].mean()),
            mean_fake=float(column[labels == 1].mean()),
            mean_abs=float(np.abs(column).mean()),
            head_weight_norm=float(torch.linalg.vector_norm(head.block(i).detach().double())),
        ))
    logger.info(f"Importance profile over {n_real} real / {n_fake} fake images")
    return ImportanceProfile(per_layer, n_real, n_fake, float(head.b.detach().double().item()))


def criterion_value(entry: LayerImportance, criterion: RankingCriterion) -> float:
    if criterion is RankingCriterion.CLASS_GAP:
        return abs(entry.class_gap)
    if criterion is RankingCriterion.HEAD_WEIGHT_NORM:
        return entry.head_weight_norm
    return entry.mean_abs


def rank_layers(profile: ImportanceProfile,
                criterion: RankingCriterion = RankingCriterion.MEAN_ABS_CONTRIBUTION) -> List[int]:
    """Layer indices by descending importance; ties go to the lower index"""
    ordered = sorted(profile.per_layer, key=lambda e: (-criterion_value(e, criterion), e.layer_index))
    return [e.layer_index for e in ordered]


# =============================================================================
# TRIMMING
# =============================================================================

@dataclass(frozen=True)
class TrimPlan:
    selected_layers: Tuple[int, ...]
    ranking_criterion: Optional[RankingCriterion]
    analysis_param_count_full: int
    analysis_param_count_trimmed: int

    def to_dict(self) -> Dict:
        return {
            "selected_layers": list(self.selected_layers),
            "ranking_criterion": self.ranking_criterion.value if self.ranking_criterion else None,
            "analysis_param_count_full": self.analysis_param_count_full,
            "analysis_param_count_trimmed": self.analysis_param_count_trimmed,
        }


@dataclass(frozen=True)
class ParamBudget:
    full: int
    trimmed: int
    fraction: float

    def to_dict(self) -> Dict:
        return {"full": self.full, "trimmed": self.trimmed, "fraction": self.fraction}


def projector_param_counts(model: AggregationModel) -> List[int]:
    return [sum(p.numel() for p in projector.parameters()) for projector in model.projectors]


def _analysis_counts(model: AggregationModel, layers: Sequence[int]):
    per_projector = projector_param_counts(model)
    block = model.head.primitive_dim
    full = sum(per_projector) + block * model.L + 1
    trimmed = sum(per_projector[i - 1] for i in layers) + block * len(layers) + 1
    return full, trimmed


def _check_selection(model: AggregationModel, layers: Sequence[int]):
    if not layers:
        raise InvalidArgumentError("trim selection is empty")
    if len(set(layers)) != len(layers):
        raise InvalidArgumentError(f"duplicate layers in selection {list(layers)}")
    bad = [i for i in layers if not 1 <= i <= model.L]
    if bad:
        raise InvalidArgumentError(f"layers {bad} outside 1..{model.L}")


def plan_for_layers(model: AggregationModel, layers: Sequence[int],
                    criterion: Optional[RankingCriterion] = None) -> TrimPlan:
    """TrimPlan for an explicit layer selection"""
    layers = tuple(int(i) for i in layers)
    _check_selection(model, layers)
    full, trimmed = _analysis_counts(model, layers)
    return TrimPlan(layers, criterion, full, trimmed)


def make_trim_plan(model: AggregationModel, profile: ImportanceProfile, n: int,
                   criterion: RankingCriterion = RankingCriterion.MEAN_ABS_CONTRIBUTION) -> TrimPlan:
    """Keep the n top-ranked layers"""
    if not 1 <= n <= model.L:
        raise InvalidArgumentError(f"n must be in [1, {model.L}], got {n}")
    return plan_for_layers(model, rank_layers(profile, criterion)[:n], criterion)


def analysis_param_budget(model: AggregationModel, plan: TrimPlan) -> ParamBudget:
    """Projector + head parameter counts of the full and trimmed analysis network"""
    _check_selection(model, plan.selected_layers)
    full, trimmed = _analysis_counts(model, plan.selected_layers)
    return ParamBudget(full, trimmed, trimmed / full)


class TrimmedModel(nn.Module):
    """Logit = Σ_{i in selected} w_i · p_i + b, sharing weights with the full model"""

    def __init__(self, model: AggregationModel, layers: Sequence[int]):
        super().__init__()
        _check_selection(model, layers)
        self.config = model.config
        self.selected_layers = tuple(sorted(int(i) for i in layers))
        self.deepest = self.selected_layers[-1]
        self.backbone = model.backbone
        self.projectors = nn.ModuleDict({str(i): model.projectors[i - 1] for i in self.selected_layers})
        self.head = model.head

    @property
    def L(self) -> int:
        return self.config.backbone.L

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        taps = self.backbone.forward_with_taps(images, upto=self.deepest)
        logit = self.head.b.double().expand(images.shape[0])
        for i in self.selected_layers:
            primitive = project_primitive(taps[i - 1], self.projectors[str(i)])
            logit = logit + primitive.values.double() @ self.head.block(i).double()
        return logit


def trim(model: AggregationModel, plan: TrimPlan) -> TrimmedModel:
    return TrimmedModel(model, plan.selected_layers)


def ap_degradation(full_matrix: ExperimentMatrix, trimmed_matrix: ExperimentMatrix) -> float:
    """Mean absolute AP difference over all cells, in percentage points"""
    if full_matrix.shape != trimmed_matrix.shape:
        raise InvalidArgumentError(f"matrix shapes differ: {full_matrix.shape} vs {trimmed_matrix.shape}")
    if full_matrix.rows != trimmed_matrix.rows or full_matrix.cols != trimmed_matrix.cols:
        raise InvalidArgumentError("matrices must share row and column labels")
    diff = np.abs(full_matrix.ap - trimmed_matrix.ap)
    if np.isnan(diff).any():
        raise InvalidArgumentError("matrices contain failed (NaN) cells")
    return float(diff.mean())


@dataclass
class TrimPoint:
    n: int
    plans: Dict[str, TrimPlan]
    matrix: ExperimentMatrix
    ap_degradation: float

    def mean_fraction(self) -> float:
        fractions = [p.analysis_param_count_trimmed / p.analysis_param_count_full for p in self.plans.values()]
        return float(np.mean(fractions))


@dataclass
class TrimCurve:
    full_matrix: ExperimentMatrix
    points: List[TrimPoint] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for point in self.points:
            for name, plan in point.plans.items():
                rows.append({
                    "n": point.n,
                    "model": name,
                    "selected_layers": " ".join(str(i) for i in plan.selected_layers),
                    "params_full": plan.analysis_param_count_full,
                    "params_trimmed": plan.analysis_param_count_trimmed,
                    "fraction": plan.analysis_param_count_trimmed / plan.analysis_param_count_full,
                    "ap_degradation": point.ap_degradation,
                })
        return pd.DataFrame(rows)


def trim_curve(models: Mapping[str, AggregationModel], profiles: Mapping[str, ImportanceProfile],
               datasets: Mapping[str, LabeledDataset], ns: Sequence[int],
               criterion: RankingCriterion = RankingCriterion.MEAN_ABS_CONTRIBUTION,
               full_matrix: Optional[ExperimentMatrix] = None, max_workers: int = 1) -> TrimCurve:
    """
    AP degradation of the trimmed models for each N.

    Each model is trimmed by its own importance profile; the degradation is
    taken over the whole cross matrix.
    """
    if full_matrix is None:
        full_matrix = cross_matrix(models, datasets, max_workers)
    curve = TrimCurve(full_matrix)
    for n in ns:
        plans = {name: make_trim_plan(model, profiles[name], n, criterion) for name, model in models.items()}
        trimmed = {name: trim(model, plans[name]) for name, model in models.items()}
        matrix = cross_matrix(trimmed, datasets, max_workers)
        point = TrimPoint(n, plans, matrix, ap_degradation(full_matrix, matrix))
        logger.info(f"N={n}: AP degradation {point.ap_degradation:.3f}, "
                    f"mean parameter fraction {point.mean_fraction():.4f}")
        curve.points.append(point)
    return curve


# =============================================================================
# FIGURES
# =============================================================================

def importance_figure(profile: ImportanceProfile, title: str = "Layer importance") -> Figure:
    """Grouped bars of mean real / mean fake contribution per layer (raw values)"""
    frame = profile.to_frame()
    x = np.arange(len(frame))
    figure = Figure(figsize=(8, 4))
    ax = figure.add_subplot(1, 1, 1)
    ax.bar(x - 0.2, frame["mean_real"], width=0.4, label=f"real (n={profile.n_real})")
    ax.bar(x + 0.2, frame["mean_fake"], width=0.4, label=f"fake (n={profile.n_fake})")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels([str(i) for i in frame["layer_index"]])
    ax.set_xlabel("layer")
    ax.set_ylabel("mean w_i · p_i (raw)")
    ax.set_title(title)
    ax.legend()
    figure.tight_layout()
    return figure


def trim_figure(curve: TrimCurve) -> Figure:
    figure = Figure(figsize=(6, 4))
    ax = figure.add_subplot(1, 1, 1)
    labels = [str(p.n) for p in curve.points]
    ax.bar(labels, [p.ap_degradation for p in curve.points])
    ax.set_xlabel("N most important primitive projections")
    ax.set_ylabel("AP degradation (points)")
    ax.set_title("Trimmed aggregation")
    figure.tight_layout()
    return figure
