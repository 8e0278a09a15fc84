#!/usr/bin/env python3
"""
Checkpoint Manager
Versioned save/load of trained aggregation models

A checkpoint file is a ZIP container (stored, fixed timestamps) holding:

    metadata.json         format version, model config, array index, train metadata
    arrays/<name>.f32     raw little-endian float32 data, C order

Array names are the model's canonical state_dict names
(e.g. "backbone.layers.0.0.weight", "projectors.3.mlp.4.bias", "head.w").
See docs/checkpoint_format.md for the byte layout.
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import torch

from laf.aggregation_model import AggregationModel, ModelConfig
from laf.desknet import BackboneConfig
from laf.errors import CheckpointFormatError, ConfigMismatchError, UnsupportedVersionError
from laf.report_writer import atomic_write_bytes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
METADATA_NAME = "metadata.json"
ARRAY_DTYPE = "<f4"
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)

# BatchNorm bookkeeping counters; not parameters of the decision function
SKIPPED_SUFFIXES = ("num_batches_tracked",)


@dataclass
class Checkpoint:
    format_version: int
    model_config: ModelConfig
    arrays: Dict[str, np.ndarray]
    train_metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: AggregationModel, train_metadata: Dict[str, Any] = None) -> "Checkpoint":
        arrays = {}
        for name, tensor in model.state_dict().items():
            if name.endswith(SKIPPED_SUFFIXES):
                continue
            arrays[name] = tensor.detach().cpu().numpy().astype(ARRAY_DTYPE, copy=True)
        return cls(FORMAT_VERSION, model.config, arrays, dict(train_metadata or {}))

    @property
    def best_val_ap(self) -> float:
        return float(self.train_metadata.get("best_val_ap", float("nan")))

    @property
    def family(self) -> str:
        return str(self.train_metadata.get("family", ""))


def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=ZIP_TIMESTAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint to the container bytes (deterministic)"""
    index = {}
    for name in sorted(ckpt.arrays):
        array = ckpt.arrays[name]
        index[name] = {"file": f"arrays/{name}.f32", "shape": list(array.shape), "dtype": ARRAY_DTYPE}
    metadata = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "arrays": index,
        "train": ckpt.train_metadata,
    }
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as archive:
        archive.writestr(_zip_entry(METADATA_NAME), json.dumps(metadata, indent=2, sort_keys=True))
        for name in sorted(ckpt.arrays):
            data = np.ascontiguousarray(ckpt.arrays[name], dtype=ARRAY_DTYPE).tobytes(order="C")
            archive.writestr(_zip_entry(index[name]["file"]), data)
    return buffer.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write the checkpoint atomically"""
    path = atomic_write_bytes(path, checkpoint_bytes(ckpt))
    logger.info(f"Saved checkpoint with {len(ckpt.arrays)} arrays to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint file.

    Raises:
        UnsupportedVersionError: format_version differs from FORMAT_VERSION
        CheckpointFormatError: truncated, corrupt or inconsistent file
    """
    payload = Path(path).read_bytes()
    try:
        with zipfile.ZipFile(io.BytesIO(payload)) as archive:
            metadata = json.loads(archive.read(METADATA_NAME).decode("utf-8"))
            version = metadata.get("format_version")
            if version != FORMAT_VERSION:
                raise UnsupportedVersionError(
                    f"checkpoint format_version {version} is not supported (expected {FORMAT_VERSION})")
            arrays = {}
            for name, entry in metadata["arrays"].items():
                if entry.get("dtype") != ARRAY_DTYPE:
                    raise CheckpointFormatError(f"array {name}: unsupported dtype {entry.get('dtype')}")
                raw = archive.read(entry["file"])
                shape = tuple(int(s) for s in entry["shape"])
                expected = int(np.prod(shape, dtype=np.int64)) * 4
                if len(raw) != expected:
                    raise CheckpointFormatError(f"array {name}: {len(raw)} bytes, expected {expected}")
                arrays[name] = np.frombuffer(raw, dtype=ARRAY_DTYPE).reshape(shape).copy()
            model_config = ModelConfig.from_dict(metadata["model_config"])
    except CheckpointFormatError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, TypeError, EOFError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint {path}: {e}") from e
    logger.info(f"Loaded checkpoint {path} ({len(arrays)} arrays)")
    return Checkpoint(version, model_config, arrays, metadata.get("train", {}))


def model_from_checkpoint(ckpt: Checkpoint) -> AggregationModel:
    """Rebuild an evaluable model (eval mode) from a checkpoint"""
    model = AggregationModel(ckpt.model_config)
    state = {name: torch.from_numpy(array.copy()) for name, array in ckpt.arrays.items()}
    try:
        missing, unexpected = model.load_state_dict(state, strict=False)
    except RuntimeError as e:
        raise CheckpointFormatError(f"checkpoint arrays do not fit the model config: {e}") from e
    missing = [name for name in missing if not name.endswith(SKIPPED_SUFFIXES)]
    if missing or unexpected:
        raise CheckpointFormatError(f"checkpoint arrays missing {missing}, unexpected {list(unexpected)}")
    model.eval()
    return model


def check_compatible(ckpt: Checkpoint, backbone: BackboneConfig):
    """Raise ConfigMismatchError unless the checkpoint was built for this backbone"""
    stored = ckpt.model_config.backbone
    if stored != backbone:
        raise ConfigMismatchError(
            f"checkpoint backbone (L={stored.L}, input_size={stored.input_size}) "
            f"does not match the run config (L={backbone.L}, input_size={backbone.input_size})")


def check_image_size(ckpt: Checkpoint, image_size: int):
    expected = ckpt.model_config.backbone.input_size
    if image_size != expected:
        raise ConfigMismatchError(f"checkpoint expects {expected}px inputs, dataset has {image_size}px images")
