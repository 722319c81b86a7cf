import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from munet.data import (
    AugmentDraw,
    AugmentSpec,
    MissingClassError,
    PatchDataset,
    PatchSpec,
    apply_augmentation,
    augment,
    axis_origins,
    compute_class_weights,
    extract_patches,
    generate_synthetic,
    materialize,
)
from munet.io import load_dataset
from munet.types import UNLABELED, LabelMap, Mosaic


def _pair(rng, h, w, K=6, p_unlabeled=0.2):
    lab = rng.integers(0, K, (h, w)).astype(np.uint8)
    lab[rng.uniform(size=(h, w)) < p_unlabeled] = UNLABELED
    return Mosaic(rng.uniform(0, 1, (h, w))), LabelMap(lab)


def test_grid_patches_512():
    rng = np.random.default_rng(0)
    m, l = _pair(rng, 512, 512)
    patches = list(extract_patches(m, l, PatchSpec(256, 128, 0), seed=0))
    # (512 - 256) / 128 + 1 = 3 per axis
    assert len(patches) == 9
    img, lab = patches[4]
    np.testing.assert_array_equal(img, m.pixels[128:384, 128:384])
    np.testing.assert_array_equal(lab, l.labels[128:384, 128:384])


def test_window_sized_mosaic_is_identity_crop():
    rng = np.random.default_rng(1)
    m, l = _pair(rng, 256, 256)
    (img, lab), = extract_patches(m, l, PatchSpec(), seed=0)
    np.testing.assert_array_equal(img, m.pixels)
    np.testing.assert_array_equal(lab, l.labels)


def test_small_mosaic_is_padded():
    rng = np.random.default_rng(2)
    m, l = _pair(rng, 100, 300)
    patches = list(extract_patches(m, l, PatchSpec(), seed=0))
    assert all(p[0].shape == (256, 256) for p in patches)
    # padded label rows are UNLABELED
    assert np.all(patches[0][1][100:] == UNLABELED)


@given(
    st.integers(16, 700),
    st.integers(16, 700),
    st.sampled_from([(64, 32), (64, 64), (128, 48), (256, 128)]),
    st.integers(0, 80),
    st.integers(0, 10_000),
)
@settings(max_examples=60, deadline=None)
def test_patches_cover_everything_and_stay_in_bounds(h, w, ws, jitter, seed):
    window, stride = ws
    rng = np.random.default_rng(seed)
    j = min(jitter, stride - 1)
    oy, ox = (int(rng.integers(0, j + 1)) for _ in range(2)) if j else (0, 0)
    ys = axis_origins(max(h, window), window, stride, oy)
    xs = axis_origins(max(w, window), window, stride, ox)
    cover = np.zeros((max(h, window), max(w, window)), dtype=int)
    for y in ys:
        for x in xs:
            assert 0 <= y and y + window <= cover.shape[0]
            assert 0 <= x and x + window <= cover.shape[1]
            cover[y : y + window, x : x + window] += 1
    assert cover.min() >= 1
    # the emitted stream follows the same grid
    m = Mosaic(np.zeros((h, w)))
    l = LabelMap(np.zeros((h, w), np.uint8))
    n = sum(1 for _ in extract_patches(m, l, PatchSpec(window, stride, jitter), np.random.default_rng(seed)))
    assert n == len(ys) * len(xs)


def test_identity_augmentation_is_bitwise():
    rng = np.random.default_rng(3)
    m, l = _pair(rng, 32, 32)
    img, lab = apply_augmentation(m.pixels, l.labels, AugmentDraw())
    np.testing.assert_array_equal(img, m.pixels)
    np.testing.assert_array_equal(lab, l.labels)
    spec = AugmentSpec(rotations=(0,), flips=False, shear=0, intensity_shift=0)
    img, lab = augment(m.pixels, l.labels, spec, rng)
    np.testing.assert_array_equal(img, m.pixels)
    np.testing.assert_array_equal(lab, l.labels)


def test_rotation_moves_corner_label():
    lab = np.full((8, 8), 0, dtype=np.uint8)
    lab[0, 0] = 3
    img = np.zeros((8, 8), dtype=np.float32)
    _, out = apply_augmentation(img, lab, AugmentDraw(rotation=90))
    # np.rot90 (counter-clockwise): (r, c) -> (n-1-c, r)
    assert out[7, 0] == 3
    np.testing.assert_array_equal(np.bincount(out.ravel()), np.bincount(lab.ravel()))


def test_intensity_shift_clips():
    img = np.full((8, 8), 0.95, dtype=np.float32)
    out, _ = apply_augmentation(img, np.zeros((8, 8), np.uint8), AugmentDraw(shift=0.1))
    assert np.all(out == 1.0)


@given(st.integers(0, 10_000), st.booleans())
@settings(max_examples=40, deadline=None)
def test_augment_keeps_classes_and_never_invents_labels(seed, free):
    rng = np.random.default_rng(seed)
    lab = np.kron(rng.integers(0, 6, (4, 4)), np.ones((8, 8))).astype(np.uint8)
    lab[rng.uniform(size=lab.shape) < 0.2] = UNLABELED
    img = rng.uniform(0, 1, lab.shape).astype(np.float32)
    spec = AugmentSpec(shear=20, free_rotation=free, rotations=(0, 90, 180, 270))
    out_img, out_lab = augment(img, lab, spec, rng)
    assert out_img.shape == img.shape and out_lab.shape == lab.shape
    assert out_img.min() >= 0 and out_img.max() <= 1
    assert (out_lab == UNLABELED).sum() >= (lab == UNLABELED).sum()
    assert set(np.unique(out_lab)) <= set(np.unique(lab))


def test_shear_keeps_labels_aligned_with_image():
    # image equals label index / 10; after shear, labeled pixels still carry matching intensity
    lab = np.kron(np.arange(4).reshape(2, 2), np.ones((16, 16))).astype(np.uint8)
    img = lab.astype(np.float32) / 10
    out_img, out_lab = apply_augmentation(img, lab, AugmentDraw(shear=12.0))
    keep = out_lab != UNLABELED
    interior = ndimage.binary_erosion(keep, iterations=2) & (ndimage.minimum_filter(out_lab, 3) == ndimage.maximum_filter(out_lab, 3))
    assert interior.sum() > 100
    np.testing.assert_allclose(out_img[interior], out_lab[interior] / 10, atol=1e-6)


def test_class_weights_examples():
    labs = [np.array([[0] * 75 + [1] * 25], dtype=np.uint8)]
    np.testing.assert_allclose(compute_class_weights(labs, 2), [0.25, 0.75])
    labs = [np.array([[0, 1, 2, 2]], dtype=np.uint8)]
    np.testing.assert_allclose(compute_class_weights(labs, 3), [0.4, 0.4, 0.2])
    labs = [np.arange(6, dtype=np.uint8).reshape(2, 3), np.array([[UNLABELED]], dtype=np.uint8)]
    np.testing.assert_allclose(compute_class_weights(labs, 6), np.full(6, 1 / 6))


def test_class_weights_missing_class_is_an_error():
    with pytest.raises(MissingClassError) as info:
        compute_class_weights([np.array([[0, 0, 2]], dtype=np.uint8)], 4)
    assert info.value.classes == (1, 3)


@given(st.lists(st.integers(1, 10_000), min_size=2, max_size=8))
@settings(max_examples=50)
def test_class_weights_sum_to_one_and_order_inversely(counts):
    labs = [np.repeat(np.arange(len(counts), dtype=np.uint8), counts)[None]]
    a = compute_class_weights(labs, len(counts))
    assert abs(a.sum() - 1) < 1e-12
    for i in range(len(counts)):
        for j in range(len(counts)):
            if counts[i] < counts[j]:
                assert a[i] > a[j]


def test_synthetic_is_deterministic_and_well_formed():
    a = generate_synthetic(5, 2, 96, 0.6)
    b = generate_synthetic(5, 2, 96, 0.6)
    for (ma, la), (mb, lb) in zip(a, b):
        np.testing.assert_array_equal(ma.pixels, mb.pixels)
        np.testing.assert_array_equal(la.labels, lb.labels)
    frac = np.mean([np.mean(l.labels != UNLABELED) for _, l in a])
    assert 0.5 < frac < 0.7
    full = generate_synthetic(5, 2, 96, 1.0)
    assert all(not (l.labels == UNLABELED).any() for _, l in full)
    with pytest.raises(ValueError):
        generate_synthetic(0, 1, 32, 0.5)


def _local_features(px):
    fs = []
    for s in (3, 7, 15):
        mean = ndimage.uniform_filter(px, s)
        var = ndimage.uniform_filter(px * px, s) - mean * mean
        fs += [mean, np.sqrt(np.maximum(var, 0))]
    return np.stack(fs, -1).reshape(-1, len(fs))


def test_synthetic_classes_are_separable_by_local_statistics():
    """Per-class Gaussian classifier on local mean/std at three scales."""
    train = generate_synthetic(101, 4, 384, 1.0)
    test = generate_synthetic(202, 3, 384, 1.0)

    def xy(pairs):
        X = np.concatenate([_local_features(m.pixels.astype(np.float64)) for m, _ in pairs])
        y = np.concatenate([l.labels.ravel() for _, l in pairs])
        return X, y

    X, y = xy(train)
    Xt, yt = xy(test)
    scores = []
    for k in range(6):
        Z = X[y == k]
        mu = Z.mean(0)
        C = np.cov(Z.T) + 1e-6 * np.eye(Z.shape[1])
        D = Xt - mu
        scores.append(-0.5 * np.einsum("ij,jk,ik->i", D, np.linalg.inv(C), D) - 0.5 * np.linalg.slogdet(C)[1])
    acc = np.mean(np.argmax(scores, axis=0) == yt)
    assert acc >= 0.80


def test_materialize_round_trip(tmp_path):
    pairs = generate_synthetic(3, 2, 64, 0.5)
    manifest = materialize(pairs, tmp_path)
    back = load_dataset(manifest)
    for (m, l), (mb, lb) in zip(pairs, back):
        np.testing.assert_array_equal(l.labels, lb.labels)
        assert np.abs(m.pixels - mb.pixels).max() <= 0.5 / 65535 + 1e-7


def test_patch_dataset_epochs_are_reproducible():
    pairs = generate_synthetic(4, 2, 128, 0.7)
    ds = PatchDataset(pairs, PatchSpec(64, 32, 8), AugmentSpec(), seed=9)
    a, b = ds.epoch(1), ds.epoch(1)
    assert len(a) == len(b) >= 2 * 9
    for (ia, la), (ib, lb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(la, lb)
    c = ds.epoch(2)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, c))
