#!/usr/bin/env python3
"""
DeskNet Backbone
Small configurable convolutional backbone exposing every layer's output

Each layer is conv → batch-norm → ReLU. The forward pass returns the ordered
taps o_1 … o_L, where o_i = L_i(o_{i-1}) and o_0 is the input image. Any other
backbone can stand in as long as it follows the TapBackbone protocol.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import torch
import torch.nn as nn

from laf.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (16, 16, 32, 32, 64, 64, 128, 128)
DEFAULT_STRIDES = (2, 1, 2, 1, 2, 1, 2, 1)


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    stride: int = 1
    kernel: int = 3
    batch_norm: bool = True


@dataclass(frozen=True)
class BackboneConfig:
    """Ordered layer specs plus the expected square input size"""
    layer_specs: Tuple[LayerSpec, ...] = field(
        default_factory=lambda: tuple(LayerSpec(c, s, 3) for c, s in zip(DEFAULT_CHANNELS, DEFAULT_STRIDES))
    )
    input_size: int = 256
    in_channels: int = 3

    @property
    def L(self) -> int:
        return len(self.layer_specs)

    def validate(self):
        if self.L < 2:
            raise InvalidArgumentError(f"backbone needs at least 2 layers, got {self.L}")
        cumulative = 1
        for i, spec in enumerate(self.layer_specs, start=1):
            if spec.out_channels < 1:
                raise InvalidArgumentError(f"layer {i}: out_channels must be >= 1")
            if spec.stride not in (1, 2):
                raise InvalidArgumentError(f"layer {i}: stride must be 1 or 2, got {spec.stride}")
            if spec.kernel < 1 or spec.kernel % 2 == 0:
                raise InvalidArgumentError(f"layer {i}: kernel must be a positive odd size, got {spec.kernel}")
            cumulative *= spec.stride
        if cumulative > self.input_size:
            raise InvalidArgumentError(f"cumulative stride {cumulative} exceeds input size {self.input_size}")

    def tap_shapes(self) -> List[Tuple[int, int, int]]:
        """(C, H, W) of every tap, from conv arithmetic with 'same' padding"""
        shapes = []
        size = self.input_size
        for spec in self.layer_specs:
            pad = spec.kernel // 2
            size = (size + 2 * pad - spec.kernel) // spec.stride + 1
            shapes.append((spec.out_channels, size, size))
        return shapes

    def to_dict(self) -> Dict:
        return {
            "layer_specs": [asdict(s) for s in self.layer_specs],
            "input_size": self.input_size,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "BackboneConfig":
        return cls(
            layer_specs=tuple(LayerSpec(**s) for s in data["layer_specs"]),
            input_size=int(data["input_size"]),
            in_channels=int(data.get("in_channels", 3)),
        )


@dataclass
class FeatureMap:
    """One tapped layer output; values are N×C×H×W (batch axis first)"""
    values: torch.Tensor
    layer_index: int


@dataclass
class ParameterCount:
    total: int
    per_layer: List[int]


class TapBackbone(Protocol):
    """Anything that can produce the ordered tap list"""
    config: BackboneConfig

    def forward_with_taps(self, images: torch.Tensor, upto: Optional[int] = None) -> List[FeatureMap]:
        ...


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, spec: LayerSpec):
        layers: List[nn.Module] = [
            nn.Conv2d(in_channels, spec.out_channels, spec.kernel, stride=spec.stride,
                      padding=spec.kernel // 2, bias=True)
        ]
        if spec.batch_norm:
            layers.append(nn.BatchNorm2d(spec.out_channels))
        layers.append(nn.ReLU())
        super().__init__(*layers)


class DeskNet(nn.Module):
    """Stack of ConvBlocks whose every output is a tap"""

    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.config.validate()
        blocks = []
        channels = self.config.in_channels
        for spec in self.config.layer_specs:
            blocks.append(ConvBlock(channels, spec))
            channels = spec.out_channels
        self.layers = nn.ModuleList(blocks)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()

    def _check_input(self, images: torch.Tensor):
        expected = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise InvalidArgumentError(
                f"expected input N×{expected[0]}×{expected[1]}×{expected[2]}, got {tuple(images.shape)}")

    def forward_with_taps(self, images: torch.Tensor, upto: Optional[int] = None) -> List[FeatureMap]:
        """
        Run the backbone and return every layer output in forward order.

        Args:
            images: N×C×H×W batch matching config.input_size
            upto: stop after this layer (1-based); defaults to L

        Returns:
            [FeatureMap(o_1, 1), ..., FeatureMap(o_upto, upto)]
        """
        self._check_input(images)
        last = self.config.L if upto is None else upto
        if not 1 <= last <= self.config.L:
            raise InvalidArgumentError(f"upto must be in [1, {self.config.L}], got {upto}")
        taps = []
        x = images
        for index, layer in enumerate(self.layers[:last], start=1):
            x = layer(x)
            taps.append(FeatureMap(x, index))
        return taps

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(images)[-1].values


def _layer_parameter_count(in_channels: int, spec: LayerSpec) -> int:
    count = in_channels * spec.out_channels * spec.kernel * spec.kernel + spec.out_channels
    if spec.batch_norm:
        count += 2 * spec.out_channels
    return count


def parameter_count(params: Union[BackboneConfig, nn.Module, Sequence[LayerSpec]],
                    in_channels: int = 3) -> ParameterCount:
    """
    Exact number of trainable scalars, broken down per layer.

    Accepts a config (closed form, no validation so empty or single-layer
    configs count too), a bare list of LayerSpecs, or a built DeskNet.
    """
    if isinstance(params, DeskNet):
        per_layer = [sum(p.numel() for p in layer.parameters()) for layer in params.layers]
        return ParameterCount(sum(per_layer), per_layer)
    if isinstance(params, nn.Module):
        total = sum(p.numel() for p in params.parameters())
        return ParameterCount(total, [total])
    if isinstance(params, BackboneConfig):
        specs, in_channels = params.layer_specs, params.in_channels
    else:
        specs = tuple(params)
    per_layer = []
    channels = in_channels
    for spec in specs:
        per_layer.append(_layer_parameter_count(channels, spec))
        channels = spec.out_channels
    return ParameterCount(sum(per_layer), per_layer)
