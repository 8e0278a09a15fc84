#!/usr/bin/env python3
"""
Tests for the synthetic face generator and the on-disk dataset layout
"""

import cv2
import numpy as np
import pytest

from laf.errors import InvalidArgumentError, InvalidDatasetError
from laf.synthetic_faces import (
    DatasetSpec,
    FamilyId,
    LandmarkSet,
    ManipulationFamily,
    Split,
    apply_manipulation,
    build_dataset,
    generate_real,
    load_dataset,
    manipulated_region_mask,
    materialize_dataset,
)


def laplacian_energy(image):
    gray = cv2.cvtColor(np.asarray(image, dtype=np.float32), cv2.COLOR_RGB2GRAY)
    return float(cv2.Laplacian(gray.astype(np.float64), cv2.CV_64F).var())


def spec(family=FamilyId.LOCAL_BLEND, n_pairs=4, seed=0, split=Split.TRAIN, size=64):
    return DatasetSpec(ManipulationFamily.default(family), n_pairs, seed, split, size)


# =============================================================================
# generate_real
# =============================================================================

def test_generate_real_is_deterministic():
    first, first_landmarks = generate_real(7, 320)
    second, second_landmarks = generate_real(7, 320)
    assert np.array_equal(first, second)
    assert first_landmarks == second_landmarks


def test_different_seeds_differ_in_at_least_one_percent_of_pixels():
    a, _ = generate_real(7, 320)
    b, _ = generate_real(8, 320)
    changed = np.any(a != b, axis=2).mean()
    assert changed >= 0.01, f"only {changed:.4f} of pixels differ"


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_generated_image_range_and_landmarks(seed):
    image, landmarks = generate_real(seed, 128)
    assert image.shape == (128, 128, 3)
    assert image.dtype == np.float32
    assert image.min() >= 0.0 and image.max() <= 1.0

    landmarks.validate(128, 128)
    assert landmarks.left_eye[0] < landmarks.right_eye[0]
    x0, y0, x1, y1 = landmarks.face_box
    for x, y in landmarks.points():
        assert x0 <= x <= x1 and y0 <= y <= y1


def test_generate_real_rejects_small_size():
    with pytest.raises(InvalidArgumentError):
        generate_real(0, 63)


# =============================================================================
# apply_manipulation
# =============================================================================

def test_none_family_is_identity():
    image, landmarks = generate_real(3, 96)
    out = apply_manipulation(image, landmarks, ManipulationFamily.default(FamilyId.NONE), 3)
    assert np.array_equal(out, image)
    assert out is not image


def test_grid_artifact_raises_laplacian_energy():
    dataset = build_dataset(spec(FamilyId.GRID_ARTIFACT, n_pairs=100, size=128))
    reals = dataset.items[0::2]
    fakes = dataset.items[1::2]
    higher = sum(laplacian_energy(f.image) > laplacian_energy(r.image) for r, f in zip(reals, fakes))
    assert higher >= 95, f"fake Laplacian energy higher on only {higher}/100 pairs"


def test_local_blend_leaves_pixels_far_from_mouth_unchanged():
    image, landmarks = generate_real(11, 160)
    family = ManipulationFamily.default(FamilyId.LOCAL_BLEND)
    out = apply_manipulation(image, landmarks, family, 11)

    ys, xs = np.mgrid[0:160, 0:160]
    mx, my = landmarks.mouth_center
    radius = 2 * family.param("patch_radius")
    outside = (xs - mx) ** 2 + (ys - my) ** 2 > radius ** 2
    assert np.array_equal(out[outside], image[outside])
    assert not np.array_equal(out, image)


@pytest.mark.parametrize("family_id", [FamilyId.LOCAL_BLEND, FamilyId.EYE_TEXTURE, FamilyId.COLOR_SHIFT])
def test_manipulation_stays_inside_declared_region(family_id):
    image, landmarks = generate_real(5, 128)
    family = ManipulationFamily.default(family_id)
    out = apply_manipulation(image, landmarks, family, 5)
    region = manipulated_region_mask(landmarks, family, (128, 128))
    assert np.array_equal(out[~region], image[~region])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_manipulation_is_deterministic_per_seed():
    image, landmarks = generate_real(2, 96)
    family = ManipulationFamily.default(FamilyId.EYE_TEXTURE)
    assert np.array_equal(apply_manipulation(image, landmarks, family, 9),
                          apply_manipulation(image, landmarks, family, 9))


def test_landmark_outside_image_is_rejected():
    image, _ = generate_real(1, 64)
    bad = LandmarkSet(left_eye=(-5.0, 10.0), right_eye=(30.0, 10.0), mouth_center=(20.0, 40.0),
                      face_box=(5.0, 5.0, 50.0, 55.0))
    with pytest.raises(InvalidArgumentError):
        apply_manipulation(image, bad, ManipulationFamily.default(FamilyId.LOCAL_BLEND), 1)


def test_landmark_outside_face_box_is_rejected():
    landmarks = LandmarkSet(left_eye=(20.0, 20.0), right_eye=(40.0, 20.0), mouth_center=(30.0, 58.0),
                            face_box=(10.0, 10.0, 50.0, 50.0))
    with pytest.raises(InvalidArgumentError, match="face_box"):
        landmarks.validate(64, 64)


def test_swapped_eyes_are_rejected():
    image, good = generate_real(1, 64)
    swapped = LandmarkSet(left_eye=good.right_eye, right_eye=good.left_eye, mouth_center=good.mouth_center,
                          face_box=good.face_box)
    good.validate(64, 64)
    with pytest.raises(InvalidArgumentError, match="left eye"):
        swapped.validate(64, 64)
    with pytest.raises(InvalidArgumentError):
        apply_manipulation(image, swapped, ManipulationFamily.default(FamilyId.LOCAL_BLEND), 1)


def test_family_params_must_be_positive():
    family = ManipulationFamily(FamilyId.GRID_ARTIFACT, {"grid_period": 4.0, "strength": -0.1})
    with pytest.raises(InvalidArgumentError):
        family.validate()
    with pytest.raises(InvalidArgumentError):
        ManipulationFamily(FamilyId.NONE, {"strength": 1.0}).validate()


def test_parse_family_names():
    assert ManipulationFamily.parse("LOCAL_BLEND").id == FamilyId.LOCAL_BLEND
    with pytest.raises(InvalidArgumentError):
        ManipulationFamily.parse("faceswap")


# =============================================================================
# build_dataset
# =============================================================================

def test_build_dataset_counts_and_pairing():
    dataset = build_dataset(spec(n_pairs=50))
    labels = dataset.labels()
    assert len(dataset) == 100
    assert int((labels == 0).sum()) == 50 and int((labels == 1).sum()) == 50
    for real, fake in zip(dataset.items[0::2], dataset.items[1::2]):
        assert (real.label, fake.label) == (0, 1)
        assert real.base_seed == fake.base_seed
        assert real.landmarks == fake.landmarks


def test_build_dataset_is_deterministic_and_thread_independent():
    serial = build_dataset(spec(n_pairs=6))
    again = build_dataset(spec(n_pairs=6))
    threaded = build_dataset(spec(n_pairs=6), max_workers=3)
    for a, b, c in zip(serial.items, again.items, threaded.items):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.image, c.image)
        assert a.base_seed == b.base_seed == c.base_seed


def test_splits_share_no_base_images():
    train = spec(n_pairs=200, split=Split.TRAIN)
    val = spec(n_pairs=200, split=Split.VAL)
    test = spec(n_pairs=200, split=Split.TEST)
    assert not set(train.base_seeds()) & set(test.base_seeds())
    assert not set(train.base_seeds()) & set(val.base_seeds())
    assert not set(val.base_seeds()) & set(test.base_seeds())


def test_families_share_real_images_for_the_same_seed():
    blend = build_dataset(spec(FamilyId.LOCAL_BLEND, n_pairs=2))
    shift = build_dataset(spec(FamilyId.COLOR_SHIFT, n_pairs=2))
    assert np.array_equal(blend.items[0].image, shift.items[0].image)
    assert not np.array_equal(blend.items[1].image, shift.items[1].image)


def test_invalid_spec_is_rejected():
    with pytest.raises(InvalidArgumentError):
        build_dataset(spec(n_pairs=0))
    with pytest.raises(InvalidArgumentError):
        build_dataset(spec(size=32))


# =============================================================================
# DISK LAYOUT
# =============================================================================

def test_materialize_and_load(tmp_path):
    dataset = build_dataset(spec(FamilyId.EYE_TEXTURE, n_pairs=3, split=Split.VAL))
    manifest = materialize_dataset(dataset, tmp_path, extra={"note": "x"})
    assert manifest == tmp_path / "eye_texture" / "val" / "manifest.json"
    assert (tmp_path / "eye_texture" / "val" / "fake").is_dir()

    loaded = load_dataset(tmp_path, FamilyId.EYE_TEXTURE, Split.VAL)
    assert loaded.spec == dataset.spec
    assert loaded.labels().tolist() == dataset.labels().tolist()
    for original, restored in zip(dataset.items, loaded.items):
        assert restored.base_seed == original.base_seed
        assert restored.landmarks == original.landmarks
        # 8-bit quantization
        assert np.abs(restored.image - original.image).max() <= 0.5 / 255 + 1e-6


def test_missing_manifest(tmp_path):
    with pytest.raises(InvalidDatasetError):
        load_dataset(tmp_path, FamilyId.LOCAL_BLEND, Split.TEST)
