#!/usr/bin/env python3
"""
Model Trainer
Deterministic BCE training of an AggregationModel with validation-AP selection
"""

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from laf.aggregation_model import AggregationModel, bce_loss_from_logits, images_to_tensor
from laf.ap_evaluator import average_precision, score_dataset
from laf.checkpoint_manager import Checkpoint
from laf.errors import ConfigMismatchError, InvalidArgumentError, InvalidDatasetError
from laf.synthetic_faces import LabeledDataset

logger = logging.getLogger(__name__)


class OptimizerKind(Enum):
    ADAM = "adam"
    SGD_MOMENTUM = "sgd_momentum"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    early_stop_patience: int = 5
    momentum: float = 0.9  # SGD_MOMENTUM only

    def validate(self):
        # epochs = 0 is allowed: it returns the initialized model
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise InvalidArgumentError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise InvalidArgumentError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.seed < 0:
            raise InvalidArgumentError(f"seed must be non-negative, got {self.seed}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {self.momentum}")

    def to_dict(self) -> Dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "optimizer": self.optimizer.value,
            "early_stop_patience": self.early_stop_patience,
            "momentum": self.momentum,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        values = dict(data)
        if "optimizer" in values:
            values["optimizer"] = OptimizerKind(values["optimizer"])
        return cls(**values)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ap: float
    batch_losses: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_ap": self.val_ap}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochRecord]
    model: AggregationModel


@contextmanager
def deterministic_torch(seed: int):
    """Seed torch and force deterministic kernels for the duration of a run"""
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _make_optimizer(model: AggregationModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer is OptimizerKind.ADAM:
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)


def _check_dataset(name: str, dataset: LabeledDataset, model: AggregationModel):
    if len(dataset) == 0:
        raise InvalidDatasetError(f"{name} set is empty")
    try:
        dataset.require_both_labels()
    except InvalidDatasetError as e:
        raise InvalidDatasetError(f"{name} set: {e}") from e
    expected = model.config.backbone.input_size
    if dataset.image_size() != expected:
        raise ConfigMismatchError(f"{name} images are {dataset.image_size()}px, model expects {expected}px")


def _validation_ap(model: AggregationModel, val_set: LabeledDataset) -> float:
    return average_precision(score_dataset(model, val_set), val_set.labels()).value


def train(model: AggregationModel, train_set: LabeledDataset, val_set: LabeledDataset,
          config: Optional[TrainConfig] = None, reinitialize: bool = True,
          metadata: Optional[Dict] = None) -> TrainResult:
    """
    Train with mean BCE on logits and keep the parameters with the best validation AP.

    The initialized model counts as epoch 0; a later epoch replaces it only on a
    strict AP improvement. Training stops after `early_stop_patience` epochs
    without improvement.

    Args:
        model: model to train in place (re-initialized from config.seed unless reinitialize=False)
        train_set, val_set: non-empty datasets holding both labels
        config: hyperparameters, TrainConfig() when omitted
        metadata: extra fields stored in the checkpoint (e.g. family)

    Returns:
        TrainResult with the best checkpoint, per-epoch history and the model (eval mode)
    """
    config = config or TrainConfig()
    config.validate()
    _check_dataset("train", train_set, model)
    _check_dataset("val", val_set, model)

    history: List[EpochRecord] = []
    with deterministic_torch(config.seed):
        if reinitialize:
            model.reset_parameters()

        images = images_to_tensor(train_set.images())
        labels = torch.from_numpy(train_set.labels().astype(np.float64))
        loader = DataLoader(
            TensorDataset(images, labels),
            batch_size=config.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(config.seed),
        )
        optimizer = _make_optimizer(model, config)

        best_ap = _validation_ap(model, val_set)
        best_epoch = 0
        best_state = copy.deepcopy(model.state_dict())
        stale = 0
        logger.info(f"Training on {len(train_set)} images for up to {config.epochs} epochs "
                    f"(initial val AP {best_ap:.4f})")

        for epoch in range(1, config.epochs + 1):
            model.train()
            batch_losses = []
            weighted = 0.0
            for batch_images, batch_labels in loader:
                optimizer.zero_grad()
                loss = bce_loss_from_logits(model(batch_images), batch_labels)
                loss.backward()
                optimizer.step()
                batch_losses.append(float(loss.item()))
                weighted += float(loss.item()) * len(batch_labels)

            val_ap = _validation_ap(model, val_set)
            record = EpochRecord(epoch, weighted / len(train_set), val_ap, batch_losses)
            history.append(record)
            logger.info(f"Epoch {epoch}: loss {record.train_loss:.5f}, val AP {val_ap:.4f}")

            if val_ap > best_ap:
                best_ap, best_epoch, stale = val_ap, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    logger.info(f"Early stop after epoch {epoch}, best epoch {best_epoch}")
                    break

    model.load_state_dict(best_state)
    model.eval()
    train_metadata = dict(metadata or {})
    train_metadata.update({
        "train_config": config.to_dict(),
        "seed": config.seed,
        "best_val_ap": best_ap,
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "n_train": len(train_set),
        "n_val": len(val_set),
    })
    logger.info(f"Best val AP {best_ap:.4f} at epoch {best_epoch}")
    return TrainResult(Checkpoint.from_model(model, train_metadata), history, model)
