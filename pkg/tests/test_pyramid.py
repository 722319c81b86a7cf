import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from munet.pyramid import (
    build_pyramid,
    downsample_image,
    downsample_labels,
    downsample_tensor,
    image_pyramid,
    upsample_probability,
)
from munet.types import UNLABELED, LabelMap, Mosaic, ProbabilityMap


def test_constant_image_stays_constant():
    levels = downsample_image(Mosaic(np.full((40, 24), 0.5)), 3)
    assert [lv.pixels.shape for lv in levels] == [(40, 24), (20, 12), (10, 6)]
    for lv in levels:
        assert np.all(lv.pixels == 0.5)


def test_two_by_two_block_mean():
    levels = downsample_image(Mosaic(np.array([[0.0, 1.0], [1.0, 0.0]])), 2)
    assert levels[1].pixels.shape == (1, 1)
    assert levels[1].pixels[0, 0] == 0.5


def test_checkerboard_deepest_is_global_mean():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    levels = downsample_image(Mosaic(board), 3)
    # direct block-mean: every 2x2 block of a checkerboard has mean 0.5
    assert levels[2].pixels.shape == (1, 1)
    assert levels[2].pixels[0, 0] == pytest.approx(board.mean())


def test_level_zero_unchanged_and_odd_sizes_ceil(rng):
    px = rng.uniform(0, 1, (9, 5)).astype(np.float32)
    levels = downsample_image(Mosaic(px), 3)
    np.testing.assert_array_equal(levels[0].pixels, px)
    assert [lv.pixels.shape for lv in levels] == [(9, 5), (5, 3), (3, 2)]
    # ragged border replicates the edge: last row of level 1 = mean of row 8 pairs
    assert levels[1].pixels[4, 0] == pytest.approx(px[8, 0:2].mean(), abs=1e-6)
    assert levels[1].pixels[4, 2] == pytest.approx(px[8, 4], abs=1e-6)


def test_too_small_for_levels():
    with pytest.raises(ValueError):
        downsample_image(Mosaic(np.zeros((3, 8))), 3)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_mean_preserved_for_power_of_two_sizes(eh, ew, seed):
    px = np.random.default_rng(seed).uniform(0, 1, (2**eh, 2**ew))
    levels = downsample_image(Mosaic(px), min(eh, ew) + 1)
    for lv in levels:
        assert abs(lv.pixels.mean() - levels[0].pixels.mean()) < 1e-6


def test_label_downsampling_cases():
    uniform = downsample_labels(LabelMap(np.full((8, 8), 3)), 3)
    assert all(np.all(lv.labels == 3) for lv in uniform)
    small = downsample_labels(LabelMap(np.array([[1, UNLABELED], [2, 2]])), 2)
    assert small[1].labels.tolist() == [[1]]
    blank = downsample_labels(LabelMap(np.full((6, 6), UNLABELED)), 3)
    assert all(np.all(lv.labels == UNLABELED) for lv in blank)


@given(
    hnp.arrays(
        np.uint8,
        st.tuples(st.integers(4, 20), st.integers(4, 20)),
        elements=st.sampled_from([0, 1, 2, 3, 4, 5, UNLABELED]),
    )
)
@settings(max_examples=40, deadline=None)
def test_label_downsampling_invents_nothing(lab):
    levels = downsample_labels(LabelMap(lab), 3)
    seen = set(np.unique(lab))
    for lv in levels:
        assert set(np.unique(lv.labels)) <= seen


def test_pyramid_shapes_consistent(rng):
    img = Mosaic(rng.uniform(0, 1, (33, 64)))
    lab = LabelMap(rng.integers(0, 6, (33, 64)))
    pyr = build_pyramid(img, lab, 3)
    assert pyr.M == 3
    assert [lv.labels.shape for lv in pyr.labels] == [(33, 64), (17, 32), (9, 16)]


def test_upsample_constant_field():
    p = ProbabilityMap(np.full((4, 3, 5), 0.25))
    up = upsample_probability(p)
    assert up.values.shape == (4, 6, 10)
    np.testing.assert_allclose(up.values, 0.25, atol=1e-15)


def test_upsample_single_pixel():
    p = ProbabilityMap(np.array([[[0.7]], [[0.3]]]))
    up = upsample_probability(p)
    np.testing.assert_allclose(up.values[:, :, :].reshape(2, -1).T, [[0.7, 0.3]] * 4, atol=1e-15)


def test_upsample_random_field_is_simplex(rng):
    raw = rng.uniform(0, 1, (3, 4, 4))
    p = ProbabilityMap(raw / raw.sum(axis=0))
    up = upsample_probability(p)
    assert np.abs(up.values.sum(axis=0) - 1).max() < 1e-6
    assert up.values.min() >= 0


def test_tensor_twin_matches_numpy(rng):
    px = rng.uniform(0, 1, (37, 22))
    levels = downsample_image(Mosaic(px), 4)
    t = image_pyramid(torch.tensor(levels[0].pixels, dtype=torch.float64)[None, None], 4)
    for lv, tt in zip(levels, t):
        np.testing.assert_allclose(tt[0, 0].numpy(), lv.pixels, atol=1e-6)
    assert downsample_tensor(torch.zeros(1, 1, 5, 5)).shape == (1, 1, 3, 3)
