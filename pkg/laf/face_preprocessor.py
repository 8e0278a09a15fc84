#!/usr/bin/env python3
"""
Face Preprocessor
Margin crop and left-eye alignment producing canonical detector inputs

Faces are cropped with a margin of 15% of the box height on top and bottom and
10% of the box width left and right, then warped with a similarity transform
so the left eye lands on a fixed target, the eye axis is horizontal and the
inter-ocular distance is fixed. Output is out_size × out_size (256 default).
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import cv2
import numpy as np

from laf.errors import DegenerateGeometryError, InvalidArgumentError
from laf.synthetic_faces import LabeledDataset, LabeledImage, LandmarkSet

logger = logging.getLogger(__name__)

DEFAULT_OUT_SIZE = 256
DEFAULT_MARGINS = (0.10, 0.15)  # (horizontal fraction of width, vertical fraction of height)

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class CanonicalFrame:
    """Where the aligned face lands in the output image"""
    out_size: int = DEFAULT_OUT_SIZE
    left_eye_target: Tuple[float, float] = (96.0, 112.0)
    eye_axis: Tuple[float, float] = (1.0, 0.0)
    eye_distance: float = 80.0

    @classmethod
    def scaled(cls, out_size: int) -> "CanonicalFrame":
        """Default frame proportionally rescaled to another output size"""
        k = out_size / DEFAULT_OUT_SIZE
        return cls(out_size=out_size, left_eye_target=(96.0 * k, 112.0 * k), eye_distance=80.0 * k)

    def validate(self):
        tx, ty = self.left_eye_target
        if not (0 <= tx < self.out_size and 0 <= ty < self.out_size):
            raise InvalidArgumentError(f"left_eye_target {self.left_eye_target} outside [0,{self.out_size})²")
        if abs(math.hypot(*self.eye_axis) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"eye_axis {self.eye_axis} is not a unit vector")
        if self.eye_distance <= 0:
            raise InvalidArgumentError("eye_distance must be positive")


@dataclass
class AlignedFace:
    image: np.ndarray
    landmarks: LandmarkSet
    warp: np.ndarray  # 2×3


def expanded_face_box(face_box: Box, image_shape: Tuple[int, ...],
                      margins: Tuple[float, float] = DEFAULT_MARGINS) -> Tuple[int, int, int, int]:
    """
    Integer crop rectangle (x0, y0, x1, y1), end-exclusive, of a face box grown by margins.

    Args:
        face_box: (x0, y0, x1, y1) in pixels
        image_shape: shape of the image the box lives in
        margins: (fraction of box width added left and right,
                  fraction of box height added top and bottom)
    """
    x0, y0, x1, y1 = face_box
    width, height = x1 - x0, y1 - y0
    if width <= 0 or height <= 0:
        raise InvalidArgumentError(f"degenerate face box {face_box}")
    h, w = image_shape[:2]
    mx, my = margins
    cx0 = max(0, int(math.floor(round(x0 - mx * width, 9))))
    cy0 = max(0, int(math.floor(round(y0 - my * height, 9))))
    cx1 = min(w, int(math.ceil(round(x1 + mx * width, 9))))
    cy1 = min(h, int(math.ceil(round(y1 + my * height, 9))))
    return cx0, cy0, cx1, cy1


def crop_with_margin(image: np.ndarray, face_box: Box,
                     margins: Tuple[float, float] = DEFAULT_MARGINS) -> np.ndarray:
    """Crop the face box plus margins, clipped to the image bounds"""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = face_box
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise InvalidArgumentError(f"face box {face_box} not inside {w}x{h} image")
    cx0, cy0, cx1, cy1 = expanded_face_box(face_box, image.shape, margins)
    return image[cy0:cy1, cx0:cx1].copy()


def shift_landmarks(landmarks: LandmarkSet, dx: float, dy: float) -> LandmarkSet:
    def move(p):
        return (p[0] + dx, p[1] + dy)

    x0, y0, x1, y1 = landmarks.face_box
    return LandmarkSet(
        left_eye=move(landmarks.left_eye),
        right_eye=move(landmarks.right_eye),
        mouth_center=move(landmarks.mouth_center),
        face_box=(x0 + dx, y0 + dy, x1 + dx, y1 + dy),
    )


def apply_warp(warp: np.ndarray, point: Tuple[float, float]) -> Tuple[float, float]:
    x, y = point
    return (
        float(warp[0, 0] * x + warp[0, 1] * y + warp[0, 2]),
        float(warp[1, 0] * x + warp[1, 1] * y + warp[1, 2]),
    )


def transform_landmarks(landmarks: LandmarkSet, warp: np.ndarray) -> LandmarkSet:
    """Map landmarks through a 2×3 affine; the face box becomes the bbox of its warped corners"""
    x0, y0, x1, y1 = landmarks.face_box
    corners = [apply_warp(warp, c) for c in ((x0, y0), (x1, y0), (x0, y1), (x1, y1))]
    xs = [c[0] for c in corners]
    ys = [c[1] for c in corners]
    return LandmarkSet(
        left_eye=apply_warp(warp, landmarks.left_eye),
        right_eye=apply_warp(warp, landmarks.right_eye),
        mouth_center=apply_warp(warp, landmarks.mouth_center),
        face_box=(min(xs), min(ys), max(xs), max(ys)),
    )


def similarity_warp(landmarks: LandmarkSet, frame: CanonicalFrame) -> np.ndarray:
    """
    2×3 similarity transform mapping left_eye to the frame target and the
    left→right eye direction onto frame.eye_axis with the frame's eye distance.
    """
    lx, ly = landmarks.left_eye
    rx, ry = landmarks.right_eye
    vx, vy = rx - lx, ry - ly
    distance = math.hypot(vx, vy)
    if distance < 1e-9:
        raise DegenerateGeometryError(f"coincident eye landmarks at ({lx:.2f}, {ly:.2f})")
    scale = frame.eye_distance / distance
    angle = math.atan2(frame.eye_axis[1], frame.eye_axis[0]) - math.atan2(vy, vx)
    a = scale * math.cos(angle)
    b = scale * math.sin(angle)
    tx = frame.left_eye_target[0] - (a * lx - b * ly)
    ty = frame.left_eye_target[1] - (b * lx + a * ly)
    return np.array([[a, -b, tx], [b, a, ty]], dtype=np.float64)


def align_left_eye(image: np.ndarray, landmarks: LandmarkSet,
                   frame: Optional[CanonicalFrame] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Warp an image so the left eye sits at the canonical target.

    Bilinear resampling, out-of-source pixels filled with 0.

    Returns:
        (out_size × out_size × C image, 2×3 float64 warp)
    """
    frame = frame or CanonicalFrame()
    frame.validate()
    warp = similarity_warp(landmarks, frame)
    aligned = cv2.warpAffine(
        np.ascontiguousarray(image, dtype=np.float32),
        warp,
        (frame.out_size, frame.out_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    if aligned.ndim == 2 and image.ndim == 3:
        aligned = aligned[..., None]
    return aligned, warp


def preprocess_face(image: np.ndarray, landmarks: LandmarkSet,
                    frame: Optional[CanonicalFrame] = None,
                    margins: Tuple[float, float] = DEFAULT_MARGINS) -> AlignedFace:
    """Crop with margins, carry landmarks into the crop, then align"""
    cx0, cy0, _, _ = expanded_face_box(landmarks.face_box, image.shape, margins)
    cropped = crop_with_margin(image, landmarks.face_box, margins)
    local = shift_landmarks(landmarks, -cx0, -cy0)
    aligned, warp = align_left_eye(cropped, local, frame)
    return AlignedFace(aligned, transform_landmarks(local, warp), warp)


def preprocess_dataset(dataset: LabeledDataset, frame: Optional[CanonicalFrame] = None,
                       margins: Tuple[float, float] = DEFAULT_MARGINS) -> LabeledDataset:
    """Apply preprocess_face to every item, keeping order, labels and seeds"""
    frame = frame or CanonicalFrame()
    items: List[LabeledImage] = []
    for item in dataset.items:
        face = preprocess_face(item.image, item.landmarks, frame, margins)
        items.append(LabeledImage(face.image, face.landmarks, item.label, item.base_seed))
    logger.info(f"Preprocessed {len(items)} images to {frame.out_size}x{frame.out_size}")
    return LabeledDataset(replace(dataset.spec, image_size=frame.out_size), items)


def align_region_mask(mask: np.ndarray, landmarks: LandmarkSet, frame: Optional[CanonicalFrame] = None,
                      margins: Tuple[float, float] = DEFAULT_MARGINS) -> np.ndarray:
    """Carry a boolean H×W mask of the raw image through the same crop and warp as its image"""
    face = preprocess_face(np.asarray(mask, dtype=np.float32)[..., None], landmarks, frame, margins)
    return face.image[..., 0] > 0.5
