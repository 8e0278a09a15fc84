#!/usr/bin/env python3
"""
Synthetic Face Generator
Deterministic desk-scale datasets for cross-generator experiments

Procedural "real" face-like images plus four manipulation families that stand
in for distinct face-swap / reenactment / GAN generators:

- LOCAL_BLEND:   blurred, re-toned patch around the mouth with a hard seam
- GRID_ARTIFACT: global periodic pattern like an upsampling checkerboard
- EYE_TEXTURE:   eye neighborhoods replaced with correlated noise
- COLOR_SHIFT:   hue rotation restricted to the face box

Every function is a pure function of its explicit seed.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import cv2
import numpy as np

from laf.errors import InvalidArgumentError, InvalidDatasetError
from laf.report_writer import read_png, write_json, write_png

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 64
DEFAULT_IMAGE_SIZE = 320

# Splits live in disjoint seed subranges so no base image crosses splits
SPLIT_STRIDE = 1_000_000
SEED_BLOCK = 3 * SPLIT_STRIDE

Point = Tuple[float, float]
Box = Tuple[float, float, float, float]


class FamilyId(Enum):
    """Manipulation families"""
    NONE = "none"
    LOCAL_BLEND = "local_blend"
    GRID_ARTIFACT = "grid_artifact"
    EYE_TEXTURE = "eye_texture"
    COLOR_SHIFT = "color_shift"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


SPLIT_OFFSETS = {Split.TRAIN: 0, Split.VAL: SPLIT_STRIDE, Split.TEST: 2 * SPLIT_STRIDE}

FAMILY_CODES = {
    FamilyId.NONE: 0,
    FamilyId.LOCAL_BLEND: 1,
    FamilyId.GRID_ARTIFACT: 2,
    FamilyId.EYE_TEXTURE: 3,
    FamilyId.COLOR_SHIFT: 4,
}

DEFAULT_FAMILY_PARAMS: Dict[FamilyId, Dict[str, float]] = {
    FamilyId.NONE: {},
    FamilyId.LOCAL_BLEND: {"patch_radius": 24.0, "blur_sigma": 3.0, "seam_offset": 0.06},
    FamilyId.GRID_ARTIFACT: {"grid_period": 4.0, "strength": 0.05},
    FamilyId.EYE_TEXTURE: {"noise_amplitude": 0.15, "eye_radius": 14.0},
    FamilyId.COLOR_SHIFT: {"hue_shift": 0.08},
}

# The four families used for cross-generator matrices, in matrix order
MANIPULATION_FAMILIES = [
    FamilyId.LOCAL_BLEND,
    FamilyId.GRID_ARTIFACT,
    FamilyId.EYE_TEXTURE,
    FamilyId.COLOR_SHIFT,
]


@dataclass(frozen=True)
class LandmarkSet:
    """Face landmarks in pixel coordinates (x right, y down)"""
    left_eye: Point
    right_eye: Point
    mouth_center: Point
    face_box: Box  # (x0, y0, x1, y1)

    def points(self) -> List[Point]:
        return [self.left_eye, self.right_eye, self.mouth_center]

    def validate(self, width: int, height: int):
        """Raise InvalidArgumentError unless the face box lies in the image and holds every landmark"""
        x0, y0, x1, y1 = self.face_box
        if not (0 <= x0 < x1 <= width - 1 and 0 <= y0 < y1 <= height - 1):
            raise InvalidArgumentError(f"face_box {self.face_box} outside {width}x{height} image")
        for x, y in self.points():
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise InvalidArgumentError(f"landmark ({x:.1f}, {y:.1f}) outside {width}x{height} image")
            if not (x0 <= x <= x1 and y0 <= y <= y1):
                raise InvalidArgumentError(f"landmark ({x:.1f}, {y:.1f}) outside face_box {self.face_box}")
        if not self.left_eye[0] < self.right_eye[0]:
            raise InvalidArgumentError(
                f"left eye x {self.left_eye[0]:.1f} must be left of right eye x {self.right_eye[0]:.1f}")

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "left_eye": [float(v) for v in self.left_eye],
            "right_eye": [float(v) for v in self.right_eye],
            "mouth_center": [float(v) for v in self.mouth_center],
            "face_box": [float(v) for v in self.face_box],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "LandmarkSet":
        return cls(
            left_eye=tuple(data["left_eye"]),
            right_eye=tuple(data["right_eye"]),
            mouth_center=tuple(data["mouth_center"]),
            face_box=tuple(data["face_box"]),
        )


@dataclass(frozen=True)
class ManipulationFamily:
    """A manipulation family with its scalar parameters"""
    id: FamilyId
    params: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def default(cls, family_id: FamilyId) -> "ManipulationFamily":
        return cls(family_id, dict(DEFAULT_FAMILY_PARAMS[family_id]))

    @classmethod
    def parse(cls, name: str) -> "ManipulationFamily":
        """Family with default params from its string id ("local_blend", ...)"""
        try:
            return cls.default(FamilyId(name.lower()))
        except ValueError:
            known = ", ".join(f.value for f in FamilyId)
            raise InvalidArgumentError(f"unknown family '{name}' (known: {known})")

    def validate(self):
        if self.id == FamilyId.NONE:
            if self.params:
                raise InvalidArgumentError("family NONE takes no parameters")
            return
        required = DEFAULT_FAMILY_PARAMS[self.id]
        missing = set(required) - set(self.params)
        if missing:
            raise InvalidArgumentError(f"{self.id.value}: missing params {sorted(missing)}")
        for key, value in self.params.items():
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{self.id.value}: param {key}={value!r} must be > 0")

    def param(self, key: str) -> float:
        return float(self.params[key])


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate: one family, one split, n_pairs real/fake pairs"""
    family: ManipulationFamily
    n_pairs: int
    seed: int
    split: Split
    image_size: int = DEFAULT_IMAGE_SIZE

    def validate(self):
        self.family.validate()
        if not 1 <= self.n_pairs < SPLIT_STRIDE:
            raise InvalidArgumentError(f"n_pairs must be in [1, {SPLIT_STRIDE}), got {self.n_pairs}")
        if self.seed < 0:
            raise InvalidArgumentError(f"seed must be non-negative, got {self.seed}")
        if self.image_size < MIN_IMAGE_SIZE:
            raise InvalidArgumentError(f"image_size must be >= {MIN_IMAGE_SIZE}, got {self.image_size}")

    def base_seeds(self) -> List[int]:
        """Seeds of the base real images of this split (disjoint across splits)"""
        start = self.seed * SEED_BLOCK + SPLIT_OFFSETS[self.split]
        return list(range(start, start + self.n_pairs))


@dataclass
class LabeledImage:
    image: np.ndarray  # H×W×C float32 in [0,1]
    landmarks: LandmarkSet
    label: int  # 0 real, 1 fake
    base_seed: int


@dataclass
class LabeledDataset:
    """Ordered collection of labeled images"""
    spec: DatasetSpec
    items: List[LabeledImage]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[LabeledImage]:
        return iter(self.items)

    def images(self) -> np.ndarray:
        """N×H×W×C stacked images"""
        return np.stack([item.image for item in self.items])

    def labels(self) -> np.ndarray:
        return np.array([item.label for item in self.items], dtype=np.int64)

    def image_size(self) -> int:
        return int(self.items[0].image.shape[0]) if self.items else 0

    def require_both_labels(self):
        labels = set(self.labels().tolist())
        if labels != {0, 1}:
            raise InvalidDatasetError(f"dataset needs both labels, found {sorted(labels)}")


# ============================================================================
# REAL IMAGE SYNTHESIS
# ============================================================================

def _soft_ellipse(u: np.ndarray, v: np.ndarray, cu: float, cv: float,
                  ru: float, rv: float, edge: float = 1.0) -> np.ndarray:
    """Anti-aliased ellipse coverage in [0,1] (edge ≈ transition width in px)"""
    d = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    return np.clip((1.0 - d) * min(ru, rv) / edge + 0.5, 0.0, 1.0)


def _composite(canvas: np.ndarray, alpha: np.ndarray, color) -> np.ndarray:
    a = alpha[..., None]
    return canvas * (1.0 - a) + np.asarray(color, dtype=np.float64) * a


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(6, 6, 3)).astype(np.float32)
    background = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC).astype(np.float64)
    grain_size = max(4, size // 4)
    grain = rng.normal(0.0, 0.025, size=(grain_size, grain_size, 3)).astype(np.float32)
    background += cv2.resize(grain, (size, size), interpolation=cv2.INTER_LINEAR)
    return background


def generate_real(seed: int, size: int = DEFAULT_IMAGE_SIZE) -> Tuple[np.ndarray, LandmarkSet]:
    """
    Draw a procedural face-like "real" image.

    Skin-tone ellipse with two eyes (sclera, iris, pupil) and a mouth arc over a
    smooth textured background; geometry and colors are randomized per seed.

    Args:
        seed: non-negative integer seed
        size: output side length in pixels (>= 64)

    Returns:
        (size×size×3 float32 image in [0,1], LandmarkSet matching the drawing)
    """
    if size < MIN_IMAGE_SIZE:
        raise InvalidArgumentError(f"size must be >= {MIN_IMAGE_SIZE}, got {size}")
    if seed < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {seed}")
    rng = np.random.default_rng(seed)

    canvas = _textured_background(rng, size)

    # Face geometry
    cx = size * (0.5 + rng.uniform(-0.05, 0.05))
    cy = size * (0.52 + rng.uniform(-0.04, 0.04))
    a = size * rng.uniform(0.20, 0.25)
    b = a * rng.uniform(1.20, 1.35)
    theta = math.radians(rng.uniform(-10.0, 10.0))
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = cos_t * (xs - cx) + sin_t * (ys - cy)
    v = -sin_t * (xs - cx) + cos_t * (ys - cy)

    def to_image(pu: float, pv: float) -> Point:
        return (cx + cos_t * pu - sin_t * pv, cy + sin_t * pu + cos_t * pv)

    red = rng.uniform(0.55, 0.9)
    green = red * rng.uniform(0.70, 0.85)
    blue = green * rng.uniform(0.75, 0.90)
    skin = np.array([red, green, blue])

    face_alpha = _soft_ellipse(u, v, 0.0, 0.0, a, b, edge=1.5)
    radial = (u / a) ** 2 + (v / b) ** 2
    shading = (1.0 - 0.12 * np.clip(radial, 0.0, 1.0))[..., None]
    pores = rng.normal(0.0, 0.01, size=(size, size, 1))
    face_color = skin * shading + pores
    canvas = canvas * (1.0 - face_alpha[..., None]) + face_color * face_alpha[..., None]

    # Eyes
    eye_u = a * rng.uniform(0.36, 0.44)
    eye_v = -b * rng.uniform(0.18, 0.26)
    sclera_ru, sclera_rv = a * 0.16, a * 0.09
    iris_r = sclera_rv * 0.95
    iris_color = rng.uniform(0.10, 0.40, size=3)
    for side in (-1.0, 1.0):
        eu = side * eye_u
        canvas = _composite(canvas, _soft_ellipse(u, v, eu, eye_v, sclera_ru, sclera_rv), (0.92, 0.92, 0.90))
        canvas = _composite(canvas, _soft_ellipse(u, v, eu, eye_v, iris_r, iris_r), iris_color)
        canvas = _composite(canvas, _soft_ellipse(u, v, eu, eye_v, iris_r * 0.45, iris_r * 0.45), (0.05, 0.05, 0.05))

    # Mouth: lower arc of an elliptic ring
    mouth_v = b * rng.uniform(0.45, 0.55)
    mouth_ru = a * rng.uniform(0.28, 0.36)
    mouth_rv = mouth_ru * rng.uniform(0.25, 0.45)
    thickness = max(1.5, a * 0.03)
    ring = np.abs(np.sqrt((u / mouth_ru) ** 2 + ((v - mouth_v) / mouth_rv) ** 2) - 1.0) * mouth_rv
    ring_alpha = np.clip(thickness - ring, 0.0, 1.0) * ((v - mouth_v) > -0.2 * mouth_rv)
    lips = np.array([0.60, 0.20, 0.25]) * rng.uniform(0.8, 1.1)
    canvas = _composite(canvas, ring_alpha, lips)

    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)

    ext_x = math.sqrt((a * cos_t) ** 2 + (b * sin_t) ** 2)
    ext_y = math.sqrt((a * sin_t) ** 2 + (b * cos_t) ** 2)
    face_box = (
        max(0.0, cx - ext_x),
        max(0.0, cy - ext_y),
        min(size - 1.0, cx + ext_x),
        min(size - 1.0, cy + ext_y),
    )
    landmarks = LandmarkSet(
        left_eye=to_image(-eye_u, eye_v),
        right_eye=to_image(eye_u, eye_v),
        mouth_center=to_image(0.0, mouth_v),
        face_box=face_box,
    )
    return image, landmarks


# ============================================================================
# MANIPULATIONS
# ============================================================================

def _disc(shape: Tuple[int, int], center: Point, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius ** 2


def _box_slices(box: Box, shape: Tuple[int, int]) -> Tuple[slice, slice]:
    x0, y0, x1, y1 = box
    h, w = shape
    r0, r1 = max(0, int(math.floor(y0))), min(h, int(math.ceil(y1)) + 1)
    c0, c1 = max(0, int(math.floor(x0))), min(w, int(math.ceil(x1)) + 1)
    return slice(r0, r1), slice(c0, c1)


def manipulated_region_mask(landmarks: LandmarkSet, family: ManipulationFamily,
                            shape: Tuple[int, int]) -> np.ndarray:
    """Boolean H×W mask of the pixels a family is allowed to modify"""
    mask = np.zeros(shape, dtype=bool)
    if family.id == FamilyId.LOCAL_BLEND:
        mask |= _disc(shape, landmarks.mouth_center, family.param("patch_radius"))
    elif family.id == FamilyId.EYE_TEXTURE:
        radius = family.param("eye_radius")
        mask |= _disc(shape, landmarks.left_eye, radius)
        mask |= _disc(shape, landmarks.right_eye, radius)
    elif family.id == FamilyId.COLOR_SHIFT:
        rows, cols = _box_slices(landmarks.face_box, shape)
        mask[rows, cols] = True
    elif family.id == FamilyId.GRID_ARTIFACT:
        mask[:] = True
    return mask


def _local_blend(image, landmarks, family, rng):
    disc = _disc(image.shape[:2], landmarks.mouth_center, family.param("patch_radius"))
    blurred = cv2.GaussianBlur(image, (0, 0), sigmaX=family.param("blur_sigma"))
    sign = rng.choice([-1.0, 1.0])
    offset = sign * family.param("seam_offset") * rng.uniform(0.5, 1.0, size=3)
    out = image.copy()
    out[disc] = np.clip(blurred[disc] + offset, 0.0, 1.0)
    return out


def _grid_artifact(image, landmarks, family, rng):
    period = family.param("grid_period")
    phase_x, phase_y = rng.integers(0, max(1, int(period)), size=2)
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pattern = (family.param("strength")
               * np.cos(2.0 * math.pi * (xs + phase_x) / period)
               * np.cos(2.0 * math.pi * (ys + phase_y) / period))
    return np.clip(image + pattern[..., None], 0.0, 1.0)


def _eye_texture(image, landmarks, family, rng):
    h, w = image.shape[:2]
    noise = rng.normal(0.0, 1.0, size=image.shape).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigmaX=1.5)
    noise *= family.param("noise_amplitude") / max(float(noise.std()), 1e-8)
    local_mean = cv2.GaussianBlur(image, (0, 0), sigmaX=2.0)
    radius = family.param("eye_radius")
    region = _disc((h, w), landmarks.left_eye, radius) | _disc((h, w), landmarks.right_eye, radius)
    out = image.copy()
    out[region] = np.clip(local_mean[region] + noise[region], 0.0, 1.0)
    return out


def _color_shift(image, landmarks, family, rng):
    rows, cols = _box_slices(landmarks.face_box, image.shape[:2])
    patch = np.ascontiguousarray(image[rows, cols, :3])
    hsv = cv2.cvtColor(patch, cv2.COLOR_RGB2HSV)  # float32: H in [0, 360)
    shift = family.param("hue_shift") * rng.uniform(0.9, 1.1) * 360.0
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 360.0)
    out = image.copy()
    out[rows, cols, :3] = np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)
    return out


_MANIPULATIONS = {
    FamilyId.LOCAL_BLEND: _local_blend,
    FamilyId.GRID_ARTIFACT: _grid_artifact,
    FamilyId.EYE_TEXTURE: _eye_texture,
    FamilyId.COLOR_SHIFT: _color_shift,
}


def apply_manipulation(image: np.ndarray, landmarks: LandmarkSet,
                       family: ManipulationFamily, seed: int) -> np.ndarray:
    """
    Apply one manipulation family to a real image.

    Args:
        image: H×W×3 float32 image in [0,1]
        landmarks: landmarks of the drawn face
        family: manipulation family and params
        seed: non-negative seed for the family's random choices

    Returns:
        Manipulated image in [0,1]; NONE returns an unchanged copy
    """
    family.validate()
    h, w = image.shape[:2]
    landmarks.validate(w, h)
    if seed < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {seed}")
    if family.id == FamilyId.NONE:
        return image.copy()
    rng = np.random.default_rng([seed, FAMILY_CODES[family.id]])
    out = _MANIPULATIONS[family.id](np.asarray(image, dtype=np.float32), landmarks, family, rng)
    return out.astype(np.float32)


# ============================================================================
# DATASETS
# ============================================================================

def _make_pair(spec: DatasetSpec, base_seed: int) -> List[LabeledImage]:
    real, landmarks = generate_real(base_seed, spec.image_size)
    fake = apply_manipulation(real, landmarks, spec.family, base_seed)
    return [
        LabeledImage(real, landmarks, 0, base_seed),
        LabeledImage(fake, landmarks, 1, base_seed),
    ]


def build_dataset(spec: DatasetSpec, max_workers: Optional[int] = None) -> LabeledDataset:
    """
    Build n_pairs real/fake pairs for one family and split.

    Items are ordered (real_0, fake_0, real_1, fake_1, ...); fakes are derived
    from the real image of the same pair. Per-item work may run in a thread
    pool; the merge keeps seed order.
    """
    spec.validate()
    seeds = spec.base_seeds()
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            pairs = list(pool.map(lambda s: _make_pair(spec, s), seeds))
    else:
        pairs = [_make_pair(spec, s) for s in seeds]
    items = [item for pair in pairs for item in pair]
    logger.info(f"Built {spec.family.id.value}/{spec.split.value} dataset: "
                f"{len(items)} images ({spec.n_pairs} pairs, size {spec.image_size})")
    return LabeledDataset(spec, items)


def dataset_dir(root, family: FamilyId, split: Split) -> Path:
    return Path(root) / family.value / split.value


def materialize_dataset(dataset: LabeledDataset, root, extra: Optional[Dict] = None) -> Path:
    """
    Write a dataset as <root>/<family>/<split>/{real,fake}/<seed>.png plus manifest.json.

    Returns:
        Path of the written manifest
    """
    spec = dataset.spec
    target = dataset_dir(root, spec.family.id, spec.split)
    entries = []
    for item in dataset.items:
        sub = "fake" if item.label == 1 else "real"
        relative = f"{sub}/{item.base_seed}.png"
        write_png(target / relative, item.image)
        entries.append({
            "file": relative,
            "label": item.label,
            "base_seed": item.base_seed,
            "landmarks": item.landmarks.to_dict(),
        })
    manifest = {
        "family": spec.family.id.value,
        "params": spec.family.params,
        "split": spec.split.value,
        "seed": spec.seed,
        "n_pairs": spec.n_pairs,
        "image_size": spec.image_size,
        "items": entries,
    }
    if extra:
        manifest.update(extra)
    path = write_json(target / "manifest.json", manifest)
    logger.info(f"Materialized {len(entries)} images under {target}")
    return path


def load_manifest(root, family: FamilyId, split: Split) -> Dict:
    path = dataset_dir(root, family, split) / "manifest.json"
    if not path.exists():
        raise InvalidDatasetError(f"no manifest at {path}")
    with open(path, "r") as f:
        try:
            manifest = json.load(f)
        except ValueError as e:
            raise InvalidDatasetError(f"cannot parse manifest {path}: {e}") from e
    if not isinstance(manifest, dict):
        raise InvalidDatasetError(f"manifest {path} is not a JSON object")
    return manifest


def load_dataset(root, family: FamilyId, split: Split) -> LabeledDataset:
    """Read a materialized dataset back (images quantized to 8 bits)"""
    manifest = load_manifest(root, family, split)
    target = dataset_dir(root, family, split)
    try:
        spec = DatasetSpec(
            family=ManipulationFamily(FamilyId(manifest["family"]), dict(manifest["params"])),
            n_pairs=int(manifest["n_pairs"]),
            seed=int(manifest["seed"]),
            split=Split(manifest["split"]),
            image_size=int(manifest["image_size"]),
        )
        items = [
            LabeledImage(
                image=read_png(target / entry["file"]),
                landmarks=LandmarkSet.from_dict(entry["landmarks"]),
                label=int(entry["label"]),
                base_seed=int(entry["base_seed"]),
            )
            for entry in manifest["items"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidDatasetError(f"malformed manifest under {target}: {e!r}") from e
    if not items:
        raise InvalidDatasetError(f"empty dataset at {target}")
    return LabeledDataset(spec, items)
