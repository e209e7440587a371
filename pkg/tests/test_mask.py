import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fundus2video.data import lesion_disk, random_scene_params, synthesize_pair
from fundus2video.errors import ContractError
from fundus2video.mask import (
    KnowledgeMask,
    compute_mask,
    downsample_mask,
    iou,
    mask_coverage,
    scale_mask_tensor,
)


def brute_force_mask(first, last, threshold):
    """Per-pixel loop; 8-bit inputs compared directly in grey levels."""
    h, w = first.shape
    out = np.zeros((h, w), dtype=np.float32)
    for r in range(h):
        for c in range(w):
            if abs(int(last[r, c]) - int(first[r, c])) > threshold:
                out[r, c] = 1.0
    return out


def test_threshold_is_strict():
    first = np.zeros((1, 3), np.uint8)
    last = np.array([[45, 46, 44]], np.uint8)
    np.testing.assert_array_equal(compute_mask(first, last).values, [[0, 1, 0]])


def test_float_frames_use_255_scale():
    first = np.zeros((2, 2), np.float32)
    last = np.array([[0.2, 0.1], [46 / 255, 45 / 255]], np.float32)
    # 0.2*255 = 51 > 45 ; 0.1*255 = 25.5 ; 45/255 is a tie and stays unset
    np.testing.assert_array_equal(compute_mask(first, last).values, [[1, 0], [1, 0]])


def test_identical_frames_give_empty_mask():
    f = np.random.default_rng(0).integers(0, 256, (16, 16), dtype=np.uint8)
    assert compute_mask(f, f).values.sum() == 0


def test_zero_threshold_marks_every_change():
    first = np.zeros((4, 4), np.uint8)
    last = first.copy()
    last[1, 2] = 1
    assert compute_mask(first, last, threshold=0).values.sum() == 1


def test_rgb_frames_use_luminance():
    first = np.zeros((1, 1, 3), np.uint8)
    last = np.array([[[0, 100, 0]]], np.uint8)  # luminance 58.7
    assert compute_mask(first, last).values[0, 0] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 255))
def test_matches_brute_force_oracle(seed, threshold):
    r = np.random.default_rng(seed)
    first = r.integers(0, 256, (9, 7), dtype=np.uint8)
    last = r.integers(0, 256, (9, 7), dtype=np.uint8)
    np.testing.assert_array_equal(compute_mask(first, last, threshold).values, brute_force_mask(first, last, threshold))


def test_morphology_removes_isolated_pixel():
    first = np.zeros((12, 12), np.uint8)
    last = first.copy()
    last[2, 2] = 200
    last[5:10, 5:10] = 200
    raw = compute_mask(first, last).values
    clean = compute_mask(first, last, morphology=True).values
    assert raw[2, 2] == 1 and clean[2, 2] == 0
    assert clean[5:10, 5:10].all()


def test_planted_lesion_recovered():
    p = random_scene_params(3, image_size=128, n_lesions=1)
    sample = synthesize_pair(p)
    mask = compute_mask(sample.ffa_frames[0], sample.ffa_frames[-1])
    assert iou(mask.values, lesion_disk((128, 128), p.lesion_regions)) >= 0.8


def test_downsample_is_area_mean():
    values = np.zeros((4, 4), np.float32)
    values[0, 0] = values[0, 1] = values[1, 0] = 1
    values[3, 3] = 1
    out = downsample_mask(KnowledgeMask(values), factor=2)
    assert out.kind == "weighted"
    np.testing.assert_allclose(out.values, [[0.75, 0], [0, 0.25]])
    with pytest.raises(ContractError):
        downsample_mask(KnowledgeMask(values), factor=3)


def test_downsample_preserves_coverage():
    m = KnowledgeMask(np.random.default_rng(1).integers(0, 2, (16, 16)).astype(np.float32))
    assert mask_coverage(downsample_mask(m, factor=4)) == pytest.approx(mask_coverage(m), abs=1e-6)


def test_scale_mask_tensor_majority():
    m = torch.tensor([[1.0, 1.0, 0, 0], [1.0, 0, 0, 1.0]])[None, None]
    np.testing.assert_array_equal(scale_mask_tensor(m, 2)[0, 0].numpy(), [[1.0, 0.0]])
    assert scale_mask_tensor(m, 1) is m


def test_iou_conventions():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.zeros(3), np.zeros(3)) == 1.0


def test_mask_must_be_2d():
    with pytest.raises(ContractError):
        KnowledgeMask(np.zeros((1, 2, 2)))


def test_exact_threshold_difference_is_a_tie():
    first = np.zeros((8, 8), np.float32)
    last = np.full((8, 8), 45 / 255, np.float32)
    assert compute_mask(first, last).values.sum() == 0
