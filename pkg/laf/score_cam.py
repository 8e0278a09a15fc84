#!/usr/bin/env python3
"""
Score-CAM Heatmaps
Gradient-free fake-region maps at the layers driving a "fake" decision

For a chosen layer every non-constant activation channel is bilinearly
upsampled to the input size, min-max normalized and used as a soft mask on the
input. The model's fake logit on each masked input, softmaxed over channels,
weights the upsampled channels; the ReLU of that weighted sum, min-max
normalized, is the heatmap.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from laf.aggregation_model import AggregationModel, images_to_tensor
from laf.errors import DegenerateActivationError, InvalidArgumentError
from laf.face_preprocessor import DEFAULT_MARGINS, CanonicalFrame, align_region_mask, preprocess_face
from laf.report_writer import ArtifactWriter
from laf.synthetic_faces import LabeledImage, ManipulationFamily, manipulated_region_mask

logger = logging.getLogger(__name__)

CAM_BATCH_SIZE = 32
CONSTANT_EPS = 1e-12


@dataclass
class Heatmap:
    values: np.ndarray  # H×W float64 in [0, 1]
    source_layer: int


@dataclass
class CamResult:
    heatmap: Heatmap
    logit: float
    contributions: List[float]
    channel_weights: Dict[int, float] = field(default_factory=dict)
    skipped_channels: List[int] = field(default_factory=list)

    def sidecar(self) -> Dict:
        return {
            "layer": self.heatmap.source_layer,
            "logit": self.logit,
            "contributions": self.contributions,
            "n_channels_used": len(self.channel_weights),
            "skipped_channels": self.skipped_channels,
        }


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image if image.dim() == 4 else image.unsqueeze(0)
    return images_to_tensor(image)


def _min_max(values: np.ndarray) -> np.ndarray:
    low, high = float(values.min()), float(values.max())
    if high - low <= CONSTANT_EPS:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def score_cam_details(model: AggregationModel, image, layer: int,
                      batch_size: int = CAM_BATCH_SIZE) -> CamResult:
    """
    Score-CAM heatmap of one image at one layer, with the per-channel weights.

    Args:
        image: H×W×C float image (or a 1×C×H×W tensor)
        layer: 1..L

    Raises:
        InvalidArgumentError: layer outside 1..L
        DegenerateActivationError: every channel of the layer is constant
    """
    if not 1 <= layer <= model.L:
        raise InvalidArgumentError(f"layer must be in [1, {model.L}], got {layer}")
    x = _as_batch(image)
    if x.shape[0] != 1:
        raise InvalidArgumentError(f"score_cam takes one image, got a batch of {x.shape[0]}")
    height, width = x.shape[-2:]
    model.eval()

    with torch.no_grad():
        decomposition = model.decompose(x)
        activations = model.backbone.forward_with_taps(x, upto=layer)[-1].values
        upsampled = F.interpolate(activations, size=(height, width), mode="bilinear", align_corners=False)[0]
        upsampled = upsampled.double()

        # constancy is judged before upsampling, where it is exact
        raw = activations[0].double().flatten(start_dim=1)
        raw_span = raw.max(dim=1).values - raw.min(dim=1).values
        keep = [k for k in range(raw.shape[0]) if float(raw_span[k]) > CONSTANT_EPS]
        skipped = [k for k in range(raw.shape[0]) if float(raw_span[k]) <= CONSTANT_EPS]
        if not keep:
            raise DegenerateActivationError(f"all {upsampled.shape[0]} channels of layer {layer} are constant")
        if skipped:
            logger.warning(f"Layer {layer}: skipping {len(skipped)} constant channels")

        index = torch.tensor(keep)
        kept = upsampled[index].flatten(start_dim=1)
        low = kept.min(dim=1).values
        span = kept.max(dim=1).values - low
        masks = (upsampled[index] - low[:, None, None]) / span[:, None, None]

        scores = []
        for start in range(0, len(keep), batch_size):
            chunk = masks[start:start + batch_size]
            masked = (x.double() * chunk[:, None]).to(x.dtype)
            scores.append(model(masked))
        weights = torch.softmax(torch.cat(scores).double(), dim=0)

        cam = torch.relu((weights[:, None, None] * upsampled[index]).sum(dim=0))

    values = _min_max(cam.cpu().numpy())
    return CamResult(
        heatmap=Heatmap(values, layer),
        logit=float(decomposition.logits[0]),
        contributions=[float(c) for c in decomposition.contributions[0]],
        channel_weights={k: float(w) for k, w in zip(keep, weights.tolist())},
        skipped_channels=skipped,
    )


def score_cam(model: AggregationModel, image, layer: int, batch_size: int = CAM_BATCH_SIZE) -> Heatmap:
    """Score-CAM heatmap of one image at one layer"""
    return score_cam_details(model, image, layer, batch_size).heatmap


def select_cam_layers(model: AggregationModel, image, k: int) -> List[int]:
    """Top-k layers by signed contribution c_i (fake direction); ties go to the lower index"""
    if not 1 <= k <= model.L:
        raise InvalidArgumentError(f"k must be in [1, {model.L}], got {k}")
    model.eval()
    with torch.no_grad():
        c = model.decompose(_as_batch(image)).as_numpy()[0]
    order = sorted(range(1, model.L + 1), key=lambda i: (-c[i - 1], i))
    return order[:k]


def cam_for_image(model: AggregationModel, image, k: int,
                  batch_size: int = CAM_BATCH_SIZE) -> List[CamResult]:
    """Heatmaps at the k layers contributing most towards "fake" for this image"""
    return [score_cam_details(model, image, layer, batch_size) for layer in select_cam_layers(model, image, k)]


def overlay(image: np.ndarray, heatmap: Heatmap, alpha: float = 0.5) -> np.ndarray:
    """JET-colored heatmap blended over an RGB image in [0,1]"""
    quantized = np.clip(np.round(heatmap.values * 255.0), 0, 255).astype(np.uint8)
    colored = cv2.cvtColor(cv2.applyColorMap(quantized, cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB)
    base = np.asarray(image, dtype=np.float64)[..., :3]
    return np.clip((1.0 - alpha) * base + alpha * colored.astype(np.float64) / 255.0, 0.0, 1.0)


def region_means(heatmap: Heatmap, mask: np.ndarray) -> Optional[tuple]:
    """(mean inside mask, mean outside mask), or None when either side is empty"""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != heatmap.values.shape:
        raise InvalidArgumentError(f"mask shape {mask.shape} != heatmap shape {heatmap.values.shape}")
    if not mask.any() or mask.all():
        return None
    return float(heatmap.values[mask].mean()), float(heatmap.values[~mask].mean())


def write_cam(writer: ArtifactWriter, stem: str, result: CamResult, image: Optional[np.ndarray] = None):
    """<stem>_layer<i>.png (8-bit grayscale), optional overlay and a JSON sidecar"""
    name = f"{stem}_layer{result.heatmap.source_layer}"
    writer.png(f"{name}.png", result.heatmap.values)
    if image is not None:
        writer.png(f"{name}_overlay.png", overlay(image, result.heatmap))
    writer.json(f"{name}.json", result.sidecar())


def cam_localization(model: AggregationModel, raw_items: Sequence[LabeledImage], family: ManipulationFamily,
                     frame: Optional[CanonicalFrame] = None, margins=DEFAULT_MARGINS, limit: int = 50,
                     batch_size: int = CAM_BATCH_SIZE) -> Dict:
    """
    How often the heatmap at each fake's top layer is hotter inside the known manipulated region.

    A fake whose heatmap is degenerate counts as a miss. Fakes whose aligned region covers
    the whole frame or none of it cannot be judged and are counted under ``skipped``.

    Args:
        raw_items: un-preprocessed items with their generation landmarks; only fakes are used
        family: the family the fakes were made with (defines the region)
        limit: number of fakes to consider
    """
    records = []
    skipped = 0
    fakes = [item for item in raw_items if item.label == 1][:limit]
    for item in fakes:
        face = preprocess_face(item.image, item.landmarks, frame, margins)
        region = manipulated_region_mask(item.landmarks, family, item.image.shape[:2])
        mask = align_region_mask(region, item.landmarks, frame, margins)
        if not mask.any() or mask.all():
            skipped += 1
            continue
        layer = select_cam_layers(model, face.image, 1)[0]
        record = {"base_seed": item.base_seed, "layer": layer, "inside": None, "outside": None,
                  "hit": False, "degenerate": False}
        try:
            heatmap = score_cam(model, face.image, layer, batch_size)
        except DegenerateActivationError as e:
            logger.warning(f"Image {item.base_seed}: {e}")
            record["degenerate"] = True
        else:
            inside, outside = region_means(heatmap, mask)
            record.update(inside=inside, outside=outside, hit=inside > outside)
        records.append(record)
    hits = sum(1 for r in records if r["hit"])
    degenerate = sum(1 for r in records if r["degenerate"])
    rate = hits / len(records) if records else float("nan")
    logger.info(f"CAM localization: {hits}/{len(records)} fakes hotter inside the manipulated region "
                f"({degenerate} degenerate, {skipped} skipped)")
    return {"family": family.id.value, "n_scored": len(records), "hits": hits, "degenerate": degenerate,
            "skipped": skipped, "rate": rate, "images": records}
