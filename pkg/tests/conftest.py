#!/usr/bin/env python3
"""
Shared fixtures: miniature run configs, small aligned datasets and random models
"""

import copy

import numpy as np
import pytest
import torch

from laf.aggregation_model import AggregationModel, ModelConfig, ProjectorConfig
from laf.desknet import BackboneConfig, LayerSpec
from laf.face_preprocessor import preprocess_dataset
from laf.settings import build_run_config, merge_settings
from laf.synthetic_faces import (
    DatasetSpec,
    FamilyId,
    LabeledDataset,
    LabeledImage,
    LandmarkSet,
    ManipulationFamily,
    Split,
    build_dataset,
)

# Small enough for the whole suite to train in seconds
MINI_SETTINGS = {
    'data': {
        'families': ['local_blend', 'grid_artifact'],
        'train_pairs': 8,
        'val_pairs': 4,
        'test_pairs': 4,
        'image_size': 64,
        'out_size': 32,
    },
    'model': {
        'channels': [4, 4, 8],
        'strides': [2, 1, 2],
        'hidden_dims': [8, 4],
    },
    'train': {
        'epochs': 2,
        'batch_size': 4,
        'early_stop_patience': 2,
    },
    'analysis': {
        'trim_n': [1, 2],
        'cam_k': 2,
        'cam_batch_size': 4,
        'cam_images': 4,
    },
}

# Tiny float64-friendly model for gradient and identity suites
TINY_MODEL = ModelConfig(
    backbone=BackboneConfig((LayerSpec(2, 2), LayerSpec(3, 1)), input_size=16),
    projector=ProjectorConfig(hidden_dims=(4, 3)),
)


def mini_settings():
    return copy.deepcopy(MINI_SETTINGS)


@pytest.fixture
def mini_config():
    return build_run_config(merge_settings(mini_settings()))


@pytest.fixture
def mini_model_config(mini_config):
    return mini_config.model_config()


def randomize_head(model, seed=0, scale=1.0):
    """Replace the zero-initialized head with random weights"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.head.w.copy_(torch.randn(model.head.w.shape, generator=generator) * scale)
        model.head.b.copy_(torch.randn(1, generator=generator) * scale)
    return model


@pytest.fixture
def model_factory():
    """make(config, seed) → eval-mode AggregationModel with random weights and head"""
    def make(config=TINY_MODEL, seed=0):
        torch.manual_seed(seed)
        model = AggregationModel(config)
        randomize_head(model, seed)
        return model.eval()
    return make


@pytest.fixture
def random_images():
    """make(n, size, seed) → N×size×size×3 float32 images in [0,1]"""
    def make(n, size, seed=0):
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, size, size, 3)).astype(np.float32)
    return make


def build_aligned(config, family, split, n_pairs=None):
    spec = DatasetSpec(
        family=ManipulationFamily.default(family),
        n_pairs=n_pairs or {Split.TRAIN: config.data.train_pairs, Split.VAL: config.data.val_pairs,
                            Split.TEST: config.data.test_pairs}[split],
        seed=config.data.seed,
        split=split,
        image_size=config.data.image_size,
    )
    return preprocess_dataset(build_dataset(spec), config.data.frame(), config.data.margins)


@pytest.fixture(scope="session")
def mini_datasets():
    """Aligned {(family, split): LabeledDataset} for the two mini families"""
    config = build_run_config(merge_settings(mini_settings()))
    return {
        (family, split): build_aligned(config, family, split)
        for family in (FamilyId.LOCAL_BLEND, FamilyId.GRID_ARTIFACT)
        for split in Split
    }


@pytest.fixture
def aligned_factory():
    """make(config, family, split, n_pairs=None) → aligned LabeledDataset"""
    return build_aligned


@pytest.fixture
def dataset_factory():
    """make(n_pairs, size, seed, family) → LabeledDataset of random images, alternating real/fake"""
    def make(n_pairs, size=16, seed=0, family=FamilyId.LOCAL_BLEND):
        rng = np.random.default_rng(seed)
        c = size / 2
        landmarks = LandmarkSet((c - 3, c - 2), (c + 3, c - 2), (c, c + 3), (1.0, 1.0, size - 2.0, size - 2.0))
        items = []
        for k in range(n_pairs):
            for label in (0, 1):
                image = rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)
                items.append(LabeledImage(image, landmarks, label, k))
        spec = DatasetSpec(ManipulationFamily.default(family), n_pairs, seed, Split.TEST, max(size, 64))
        return LabeledDataset(spec, items)
    return make
