#!/usr/bin/env python3
"""
Run Configuration
Default settings, config-file loading and validation for every command

A run config is a JSON or YAML document with the sections of DEFAULT_SETTINGS.
Partial documents are merged over the defaults; unknown sections or keys are
rejected before any work starts. LAF_SEED (environment or .env) overrides both
the data seed and the training seed.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv

from laf.aggregation_model import ModelConfig, ProjectorConfig
from laf.ap_evaluator import AggregationMode
from laf.desknet import DEFAULT_CHANNELS, DEFAULT_STRIDES, BackboneConfig, LayerSpec
from laf.errors import ConfigError, InvalidArgumentError
from laf.face_preprocessor import DEFAULT_MARGINS, DEFAULT_OUT_SIZE, CanonicalFrame
from laf.layer_analysis import RankingCriterion
from laf.model_trainer import OptimizerKind, TrainConfig
from laf.synthetic_faces import DEFAULT_IMAGE_SIZE, MANIPULATION_FAMILIES, FamilyId

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "LAF_SEED"
DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "settings.json"

# Default settings structure
DEFAULT_SETTINGS = {
    'data': {
        'root': 'data/synthetic',
        'seed': 0,
        'families': [f.value for f in MANIPULATION_FAMILIES],
        'train_pairs': 200,
        'val_pairs': 50,
        'test_pairs': 100,
        'image_size': DEFAULT_IMAGE_SIZE,  # pre-crop
        'out_size': DEFAULT_OUT_SIZE,  # after alignment, = backbone input
        'margins': list(DEFAULT_MARGINS),
        'max_workers': 1
    },
    'model': {
        'channels': list(DEFAULT_CHANNELS),
        'strides': list(DEFAULT_STRIDES),
        'kernel': 3,
        'batch_norm': True,
        'hidden_dims': [128, 32],
        'pooled_extent': 4
    },
    'train': {
        'epochs': 30,
        'batch_size': 32,
        'learning_rate': 1e-3,
        'seed': 0,
        'optimizer': 'adam',  # 'adam', 'sgd_momentum'
        'early_stop_patience': 5,
        'momentum': 0.9
    },
    'eval': {
        'modes': ['include_all', 'exclude_train_column'],
        'max_workers': 1
    },
    'analysis': {
        'criterion': 'mean_abs_contribution',  # 'class_gap', 'head_weight_norm'
        'trim_n': [1, 3],
        'cam_k': 2,
        'cam_batch_size': 32,
        'cam_images': 50
    }
}


# =============================================================================
# SECTIONS
# =============================================================================

@dataclass(frozen=True)
class DataSettings:
    root: str = 'data/synthetic'
    seed: int = 0
    families: Tuple[FamilyId, ...] = tuple(MANIPULATION_FAMILIES)
    train_pairs: int = 200
    val_pairs: int = 50
    test_pairs: int = 100
    image_size: int = DEFAULT_IMAGE_SIZE
    out_size: int = DEFAULT_OUT_SIZE
    margins: Tuple[float, float] = DEFAULT_MARGINS
    max_workers: int = 1

    def validate(self):
        if not self.families:
            raise ConfigError("data.families must name at least one family")
        if FamilyId.NONE in self.families:
            raise ConfigError("data.families cannot contain 'none'")
        for key in ('train_pairs', 'val_pairs', 'test_pairs', 'max_workers'):
            if getattr(self, key) < 1:
                raise ConfigError(f"data.{key} must be >= 1")
        if self.seed < 0:
            raise ConfigError("data.seed must be non-negative")
        if any(m < 0 for m in self.margins) or len(self.margins) != 2:
            raise ConfigError(f"data.margins must be two non-negative fractions, got {self.margins}")

    def frame(self) -> CanonicalFrame:
        return CanonicalFrame.scaled(self.out_size)


@dataclass(frozen=True)
class ModelSettings:
    channels: Tuple[int, ...] = DEFAULT_CHANNELS
    strides: Tuple[int, ...] = DEFAULT_STRIDES
    kernel: int = 3
    batch_norm: bool = True
    hidden_dims: Tuple[int, int] = (128, 32)
    pooled_extent: int = 4

    def validate(self):
        if len(self.channels) != len(self.strides):
            raise ConfigError(f"model.channels ({len(self.channels)}) and model.strides "
                              f"({len(self.strides)}) must have the same length")

    def model_config(self, input_size: int) -> ModelConfig:
        specs = tuple(LayerSpec(c, s, self.kernel, self.batch_norm) for c, s in zip(self.channels, self.strides))
        return ModelConfig(
            backbone=BackboneConfig(specs, input_size=input_size),
            projector=ProjectorConfig(tuple(self.hidden_dims), pooled_extent=self.pooled_extent),
        )


@dataclass(frozen=True)
class EvalSettings:
    modes: Tuple[AggregationMode, ...] = (AggregationMode.INCLUDE_ALL, AggregationMode.EXCLUDE_TRAIN_COLUMN)
    max_workers: int = 1

    def validate(self):
        if not self.modes:
            raise ConfigError("eval.modes must name at least one aggregation mode")
        if self.max_workers < 1:
            raise ConfigError("eval.max_workers must be >= 1")


@dataclass(frozen=True)
class AnalysisSettings:
    criterion: RankingCriterion = RankingCriterion.MEAN_ABS_CONTRIBUTION
    trim_n: Tuple[int, ...] = (1, 3)
    cam_k: int = 2
    cam_batch_size: int = 32
    cam_images: int = 50

    def validate(self):
        if any(n < 1 for n in self.trim_n):
            raise ConfigError(f"analysis.trim_n values must be >= 1, got {self.trim_n}")
        for key in ('cam_k', 'cam_batch_size', 'cam_images'):
            if getattr(self, key) < 1:
                raise ConfigError(f"analysis.{key} must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def model_config(self) -> ModelConfig:
        return self.model.model_config(self.data.out_size)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.eval.validate()
        self.analysis.validate()
        try:
            self.train.validate()
            self.model_config().projector.validate()
            self.model_config().backbone.validate()
            self.data.frame().validate()
        except InvalidArgumentError as e:
            raise ConfigError(str(e)) from e
        if any(n > len(self.model.channels) for n in self.analysis.trim_n):
            raise ConfigError(f"analysis.trim_n values cannot exceed the {len(self.model.channels)} backbone layers")

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        d = self.data
        m = self.model
        a = self.analysis
        return {
            'data': {
                'root': d.root, 'seed': d.seed, 'families': [f.value for f in d.families],
                'train_pairs': d.train_pairs, 'val_pairs': d.val_pairs, 'test_pairs': d.test_pairs,
                'image_size': d.image_size, 'out_size': d.out_size, 'margins': list(d.margins),
                'max_workers': d.max_workers,
            },
            'model': {
                'channels': list(m.channels), 'strides': list(m.strides), 'kernel': m.kernel,
                'batch_norm': m.batch_norm, 'hidden_dims': list(m.hidden_dims), 'pooled_extent': m.pooled_extent,
            },
            'train': self.train.to_dict(),
            'eval': {'modes': [mode.value for mode in self.eval.modes], 'max_workers': self.eval.max_workers},
            'analysis': {
                'criterion': a.criterion.value, 'trim_n': list(a.trim_n), 'cam_k': a.cam_k,
                'cam_batch_size': a.cam_batch_size, 'cam_images': a.cam_images,
            },
        }


# =============================================================================
# LOADING
# =============================================================================

def _check_keys(document: Dict[str, Any]):
    if not isinstance(document, dict):
        raise ConfigError(f"config document must be a mapping, got {type(document).__name__}")
    for section, values in document.items():
        if section not in DEFAULT_SETTINGS:
            raise ConfigError(f"unknown config section '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"config section '{section}' must be a mapping")
        unknown = sorted(set(values) - set(DEFAULT_SETTINGS[section]))
        if unknown:
            raise ConfigError(f"unknown keys in section '{section}': {', '.join(unknown)}")


def merge_settings(document: Optional[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """Defaults with the document's sections merged in (document wins)"""
    merged = copy.deepcopy(DEFAULT_SETTINGS)
    if document:
        _check_keys(document)
        for section, values in document.items():
            merged[section].update(values)
    return merged


def _seed_override(env: Optional[Dict[str, str]]) -> Optional[int]:
    raw = (env if env is not None else os.environ).get(SEED_ENV_VAR)
    if raw is None or raw == '':
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


def _as_bool(value: Any, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{key} must be true or false, got {value!r}")
    return value


def build_run_config(settings: Dict[str, Dict[str, Any]]) -> RunConfig:
    """Typed, validated RunConfig from a fully merged settings dict"""
    d, m, t, e, a = (settings[k] for k in ('data', 'model', 'train', 'eval', 'analysis'))
    try:
        config = RunConfig(
            data=DataSettings(
                root=str(d['root']),
                seed=int(d['seed']),
                families=tuple(FamilyId(str(f).lower()) for f in d['families']),
                train_pairs=int(d['train_pairs']),
                val_pairs=int(d['val_pairs']),
                test_pairs=int(d['test_pairs']),
                image_size=int(d['image_size']),
                out_size=int(d['out_size']),
                margins=tuple(float(x) for x in d['margins']),
                max_workers=int(d['max_workers']),
            ),
            model=ModelSettings(
                channels=tuple(int(c) for c in m['channels']),
                strides=tuple(int(s) for s in m['strides']),
                kernel=int(m['kernel']),
                batch_norm=_as_bool(m['batch_norm'], 'model.batch_norm'),
                hidden_dims=tuple(int(h) for h in m['hidden_dims']),
                pooled_extent=int(m['pooled_extent']),
            ),
            train=TrainConfig(
                epochs=int(t['epochs']),
                batch_size=int(t['batch_size']),
                learning_rate=float(t['learning_rate']),
                seed=int(t['seed']),
                optimizer=OptimizerKind(str(t['optimizer']).lower()),
                early_stop_patience=int(t['early_stop_patience']),
                momentum=float(t['momentum']),
            ),
            eval=EvalSettings(
                modes=tuple(AggregationMode(str(mode).lower()) for mode in e['modes']),
                max_workers=int(e['max_workers']),
            ),
            analysis=AnalysisSettings(
                criterion=RankingCriterion(str(a['criterion']).lower()),
                trim_n=tuple(int(n) for n in a['trim_n']),
                cam_k=int(a['cam_k']),
                cam_batch_size=int(a['cam_batch_size']),
                cam_images=int(a['cam_images']),
            ),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config value: {e}") from e
    config.validate()
    return config


def load_run_config(path: Optional[Union[str, Path]] = None,
                    env: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    Load a run config.

    Args:
        path: JSON or YAML document; defaults only when omitted
        env: environment mapping to read LAF_SEED from (os.environ after .env when omitted)

    Raises:
        ConfigError: unreadable document, unknown keys or invalid values
    """
    document = None
    if path is not None:
        try:
            with open(path, 'r') as f:
                document = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        logger.info(f"Loaded run config from {path}")
    settings = merge_settings(document)

    if env is None:
        load_dotenv()
    seed = _seed_override(env)
    if seed is not None:
        logger.info(f"{SEED_ENV_VAR}={seed} overrides data and train seeds")
        settings['data']['seed'] = seed
        settings['train']['seed'] = seed
    return build_run_config(settings)
