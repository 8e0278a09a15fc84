#!/usr/bin/env python3
"""
Layer Aggregation Model
Primitive projections of every backbone layer aggregated by a linear head

For each tap o_i the Primitive Projection block computes

    p_i = MLP(AvgPool2D(o_i))            (10 numbers per layer)

and the head scores the concatenation linearly:

    logit = w · [p_1, ..., p_L] + b,     probability = sigmoid(logit)

Because the head is linear, the logit splits exactly into per-layer
contributions c_i = w_i · p_i plus b. Head arithmetic runs in float64 so that
split holds to 1e-9 even for float32 weights.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from laf.desknet import BackboneConfig, DeskNet, FeatureMap
from laf.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

PRIMITIVE_DIM = 10
PROBABILITY_EPS = 1e-7
LOGIT_LIMIT = math.log((1.0 - PROBABILITY_EPS) / PROBABILITY_EPS)


@dataclass(frozen=True)
class ProjectorConfig:
    hidden_dims: Tuple[int, int] = (128, 32)
    primitive_dim: int = PRIMITIVE_DIM
    pooled_extent: int = 4  # pool window = ceil(H / pooled_extent)

    def validate(self):
        if len(self.hidden_dims) != 2 or min(self.hidden_dims) < 1:
            raise InvalidArgumentError(f"hidden_dims must be two positive sizes, got {self.hidden_dims}")
        if self.primitive_dim != PRIMITIVE_DIM:
            raise InvalidArgumentError(f"primitive_dim is fixed at {PRIMITIVE_DIM}")
        if self.pooled_extent < 1:
            raise InvalidArgumentError("pooled_extent must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)

    def to_dict(self) -> Dict:
        return {
            "backbone": self.backbone.to_dict(),
            "projector": {
                "hidden_dims": list(self.projector.hidden_dims),
                "primitive_dim": self.projector.primitive_dim,
                "pooled_extent": self.projector.pooled_extent,
            },
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        projector = data.get("projector", {})
        return cls(
            backbone=BackboneConfig.from_dict(data["backbone"]),
            projector=ProjectorConfig(
                hidden_dims=tuple(projector.get("hidden_dims", (128, 32))),
                primitive_dim=int(projector.get("primitive_dim", PRIMITIVE_DIM)),
                pooled_extent=int(projector.get("pooled_extent", 4)),
            ),
        )


@dataclass
class PrimitiveVector:
    """p_i for a batch: values are N×10"""
    values: torch.Tensor
    layer_index: int


@dataclass
class LogitDecomposition:
    contributions: torch.Tensor  # N×L float64, column i-1 is c_i
    bias: float
    logits: torch.Tensor  # N float64

    def as_numpy(self) -> np.ndarray:
        return self.contributions.detach().cpu().numpy()


def pool_window_for(height: int, pooled_extent: int) -> int:
    """Smallest window keeping the pooled spatial extent <= pooled_extent"""
    return max(1, math.ceil(height / pooled_extent))


def projector_input_dim(tap_shape: Tuple[int, int, int], window: int) -> int:
    c, h, w = tap_shape
    return c * math.ceil(h / window) * math.ceil(w / window)


def projector_parameter_count(d_in: int, config: ProjectorConfig) -> int:
    """Closed-form parameter count of one d_in → h1 → h2 → 10 MLP"""
    h1, h2 = config.hidden_dims
    return d_in * h1 + h1 + h1 * h2 + h2 + h2 * config.primitive_dim + config.primitive_dim


class PrimitiveProjector(nn.Module):
    """AvgPool (non-overlapping, ceil mode) → flatten → FC-ReLU-FC-ReLU-FC → 10 primitives"""

    def __init__(self, layer_index: int, tap_shape: Tuple[int, int, int],
                 config: Optional[ProjectorConfig] = None, pool_window: Optional[int] = None):
        super().__init__()
        config = config or ProjectorConfig()
        self.layer_index = layer_index
        self.tap_shape = tuple(tap_shape)
        self.pool_window = pool_window or pool_window_for(tap_shape[1], config.pooled_extent)
        self.d_in = projector_input_dim(self.tap_shape, self.pool_window)
        h1, h2 = config.hidden_dims
        self.pool = nn.AvgPool2d(kernel_size=self.pool_window, stride=self.pool_window, ceil_mode=True)
        self.mlp = nn.Sequential(
            nn.Linear(self.d_in, h1),
            nn.ReLU(),
            nn.Linear(h1, h2),
            nn.ReLU(),
            nn.Linear(h2, config.primitive_dim),
        )
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.mlp:
            if isinstance(module, nn.Linear):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def pooled(self, values: torch.Tensor) -> torch.Tensor:
        """Pooled N×C×h×w tensor before flattening"""
        return self.pool(values)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return self.mlp(torch.flatten(self.pooled(values), start_dim=1))


class AggregationHead(nn.Module):
    """Linear regression over the concatenated primitives; w is L blocks of 10"""

    def __init__(self, num_layers: int, primitive_dim: int = PRIMITIVE_DIM):
        super().__init__()
        self.num_layers = num_layers
        self.primitive_dim = primitive_dim
        self.w = nn.Parameter(torch.zeros(num_layers * primitive_dim))
        self.b = nn.Parameter(torch.zeros(1))

    def block(self, layer_index: int) -> torch.Tensor:
        """w_i, the weights bound to layer i (1-based)"""
        start = (layer_index - 1) * self.primitive_dim
        return self.w[start:start + self.primitive_dim]


def project_primitive(feature: FeatureMap, projector: PrimitiveProjector) -> PrimitiveVector:
    """Project one tapped feature map to its 10 primitives"""
    if feature.layer_index != projector.layer_index:
        raise InvalidArgumentError(
            f"feature of layer {feature.layer_index} given to projector of layer {projector.layer_index}")
    if feature.values.dim() != 4 or tuple(feature.values.shape[1:]) != projector.tap_shape:
        raise InvalidArgumentError(
            f"layer {feature.layer_index}: expected N×{projector.tap_shape}, got {tuple(feature.values.shape)}")
    return PrimitiveVector(projector(feature.values), feature.layer_index)


def _check_coverage(primitives: Sequence[PrimitiveVector], head: AggregationHead):
    indices = [p.layer_index for p in primitives]
    if indices != list(range(1, head.num_layers + 1)):
        raise InvalidArgumentError(
            f"primitives must cover layers 1..{head.num_layers} in order, got {indices}")
    for p in primitives:
        if p.values.shape[-1] != head.primitive_dim:
            raise InvalidArgumentError(
                f"layer {p.layer_index}: primitive length {p.values.shape[-1]} != {head.primitive_dim}")


def aggregate(primitives: Sequence[PrimitiveVector], head: AggregationHead) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Score the concatenated primitives.

    Returns:
        (logits, probabilities), both float64 tensors of length N
    """
    _check_coverage(primitives, head)
    concatenated = torch.cat([p.values.double() for p in primitives], dim=-1)
    logits = concatenated @ head.w.double() + head.b.double()
    return logits, torch.sigmoid(logits)


def decompose_logit(primitives: Sequence[PrimitiveVector], head: AggregationHead) -> LogitDecomposition:
    """Per-layer contributions c_i = w_i · p_i; Σ c_i + b equals the aggregate logit"""
    _check_coverage(primitives, head)
    columns = [(p.values.double() * head.block(p.layer_index).double()).sum(dim=-1) for p in primitives]
    logits, _ = aggregate(primitives, head)
    return LogitDecomposition(torch.stack(columns, dim=-1), float(head.b.double().item()), logits)


def bce_loss(probability: float, label: int) -> float:
    """
    Binary cross-entropy of one prediction, evaluated in logit form.

    The probability is clamped to [1e-7, 1 - 1e-7] first.
    """
    p = min(max(float(probability), PROBABILITY_EPS), 1.0 - PROBABILITY_EPS)
    z = math.log(p) - math.log1p(-p)
    x = -z if label == 1 else z
    # softplus(x) = log(1 + e^x)
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def bce_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean BCE over a batch, with the same saturation clamp as bce_loss"""
    clamped = logits.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
    return F.binary_cross_entropy_with_logits(clamped, labels.to(clamped.dtype))


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """N×H×W×C (or H×W×C) float images to an N×C×H×W float32 tensor"""
    array = np.asarray(images, dtype=np.float32)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


class AggregationModel(nn.Module):
    """Backbone + one PrimitiveProjector per tap + AggregationHead"""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.projector.validate()
        self.backbone = DeskNet(self.config.backbone)
        shapes = self.config.backbone.tap_shapes()
        self.projectors = nn.ModuleList(
            PrimitiveProjector(i, shape, self.config.projector) for i, shape in enumerate(shapes, start=1)
        )
        self.head = AggregationHead(len(shapes), self.config.projector.primitive_dim)

    def reset_parameters(self):
        """Kaiming-uniform conv/FC weights, zero biases, zero head"""
        self.backbone.reset_parameters()
        for projector in self.projectors:
            projector.reset_parameters()
        with torch.no_grad():
            self.head.w.zero_()
            self.head.b.zero_()

    @property
    def L(self) -> int:
        return self.config.backbone.L

    def primitives(self, images: torch.Tensor) -> List[PrimitiveVector]:
        taps = self.backbone.forward_with_taps(images)
        return [project_primitive(tap, projector) for tap, projector in zip(taps, self.projectors)]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Float64 logits of length N"""
        logits, _ = aggregate(self.primitives(images), self.head)
        return logits

    def decompose(self, images: torch.Tensor) -> LogitDecomposition:
        return decompose_logit(self.primitives(images), self.head)
