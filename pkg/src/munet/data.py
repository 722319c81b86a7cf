"""Training data: patch sampling, augmentation, class weights, synthetic mosaics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .io import write_labels, write_manifest, write_mosaic
from .types import ClassTable, LabelMap, Mosaic, UNLABELED


class MissingClassError(ValueError):
    """Some class has no labeled pixel, so its inverse-frequency weight is undefined."""

    def __init__(self, classes: Sequence[int]):
        self.classes = tuple(classes)
        super().__init__(
            f"classes {list(self.classes)} have no labeled pixels; drop or merge them before training"
        )


@dataclass(frozen=True)
class PatchSpec:
    window: int = 256
    stride: int = 128
    jitter: int = 0
    max_depth: int = 4

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError("stride must be in (0, window]")
        if self.window % 2 ** self.max_depth:
            raise ValueError(f"window must be divisible by 2^{self.max_depth}")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


@dataclass(frozen=True)
class AugmentSpec:
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    flips: bool = True
    shear: float = 10.0
    intensity_shift: float = 0.1
    free_rotation: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.shear < 45:
            raise ValueError("shear must be in [0, 45) degrees")
        if not 0 <= self.intensity_shift <= 0.5:
            raise ValueError("intensity_shift must be in [0, 0.5]")
        if any(r % 90 for r in self.rotations) and not self.free_rotation:
            raise ValueError("rotations must be multiples of 90 degrees")


# patches -----------------------------------------------------------------


def axis_origins(length: int, window: int, stride: int, offset: int = 0) -> list[int]:
    """Window origins along one axis: ``offset + n*stride`` plus both flush ends.

    Always includes 0 and ``length - window`` so every index is covered.
    """
    if length <= window:
        return [0]
    last = length - window
    out = {0, last}
    o = offset
    while o <= last:
        out.add(o)
        o += stride
    return sorted(out)


def _pad_to(img: np.ndarray, lab: np.ndarray, window: int):
    ph, pw = max(window - img.shape[0], 0), max(window - img.shape[1], 0)
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="reflect" if min(img.shape) > 1 else "edge")
        lab = np.pad(lab, ((0, ph), (0, pw)), constant_values=UNLABELED)
    return img, lab


def extract_patches(
    mosaic: Mosaic,
    labels: LabelMap,
    spec: PatchSpec = PatchSpec(),
    seed: int | np.random.Generator | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(image, label)`` window pairs on a jittered regular grid.

    The grid offset is drawn once per call in ``[0, min(jitter, stride-1)]``.
    Inputs smaller than the window are reflect-padded (labels are padded
    with UNLABELED).
    """
    if mosaic.pixels.shape != labels.labels.shape:
        raise ValueError("mosaic and label map differ in shape")
    img, lab = _pad_to(np.asarray(mosaic.pixels), np.asarray(labels.labels), spec.window)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    j = min(spec.jitter, spec.stride - 1)
    oy, ox = (int(rng.integers(0, j + 1)) for _ in range(2)) if j else (0, 0)
    w = spec.window
    for y in axis_origins(img.shape[0], w, spec.stride, oy):
        for x in axis_origins(img.shape[1], w, spec.stride, ox):
            yield img[y : y + w, x : x + w].copy(), lab[y : y + w, x : x + w].copy()


# augmentation --------------------------------------------------------------


@dataclass
class AugmentDraw:
    rotation: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    shear: float = 0.0
    shift: float = 0.0

    def is_identity(self) -> bool:
        return not (self.rotation % 360 or self.flip_h or self.flip_v or self.shear or self.shift)


def draw_augmentation(spec: AugmentSpec, rng: np.random.Generator) -> AugmentDraw:
    if spec.free_rotation:
        rotation = float(rng.uniform(0, 360))
    else:
        rotation = float(spec.rotations[int(rng.integers(len(spec.rotations)))])
    flip_h = bool(rng.integers(2)) if spec.flips else False
    flip_v = bool(rng.integers(2)) if spec.flips else False
    shear = float(rng.uniform(-spec.shear, spec.shear)) if spec.shear else 0.0
    shift = float(rng.uniform(-spec.intensity_shift, spec.intensity_shift)) if spec.intensity_shift else 0.0
    return AugmentDraw(rotation, flip_h, flip_v, shear, shift)


def _forward_map_labels(lab: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Push every labeled source pixel to its rounded destination.

    ``matrix`` maps source (row, col) offsets from the center to destination
    offsets.  Destinations hit by conflicting classes or by nothing stay
    UNLABELED, so the labeled-pixel count can only shrink.
    """
    h, w = lab.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.nonzero(lab != UNLABELED)
    src = np.stack([rr - cy, cc - cx])
    dst = matrix @ src
    dr = np.rint(dst[0] + cy).astype(np.int64)
    dc = np.rint(dst[1] + cx).astype(np.int64)
    ok = (dr >= 0) & (dr < h) & (dc >= 0) & (dc < w)
    dr, dc, vals = dr[ok], dc[ok], lab[rr[ok], cc[ok]].astype(np.int64)
    flat = dr * w + dc
    out = np.full(h * w, UNLABELED, dtype=np.uint8)
    lo = np.full(h * w, 256, dtype=np.int64)
    hi = np.full(h * w, -1, dtype=np.int64)
    np.minimum.at(lo, flat, vals)
    np.maximum.at(hi, flat, vals)
    agree = (lo == hi) & (hi >= 0)
    out[agree] = lo[agree]
    return out.reshape(h, w)


def _warp_image(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    h, w = img.shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    inv = np.linalg.inv(matrix)
    offset = center - inv @ center
    return ndimage.affine_transform(img, inv, offset=offset, order=1, mode="mirror")


def apply_augmentation(image: np.ndarray, labels: np.ndarray, draw: AugmentDraw):
    if draw.is_identity():
        return image.copy(), labels.copy()
    img = np.asarray(image, dtype=np.float32)
    lab = np.asarray(labels, dtype=np.uint8)
    if draw.rotation % 90 == 0:
        k = int(draw.rotation // 90) % 4
        img, lab = np.rot90(img, k), np.rot90(lab, k)
        rot = np.eye(2)
    else:
        t = math.radians(draw.rotation)
        # (row, col) coordinates: counter-clockwise on screen
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    if draw.flip_h:
        img, lab = img[:, ::-1], lab[:, ::-1]
    if draw.flip_v:
        img, lab = img[::-1, :], lab[::-1, :]
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(draw.shear)), 1.0]])
    matrix = shear @ rot
    if not np.allclose(matrix, np.eye(2)):
        img = _warp_image(np.ascontiguousarray(img), matrix)
        lab = _forward_map_labels(np.ascontiguousarray(lab), matrix)
    if draw.shift:
        img = np.clip(img + draw.shift, 0.0, 1.0)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def augment(image: np.ndarray, labels: np.ndarray, spec: AugmentSpec, rng: np.random.Generator):
    """Random rotation, flips, horizontal shear and mean-intensity shift.

    The same geometric transform is applied to both arrays: bilinear
    resampling for the image, forward nearest-neighbor mapping for labels.
    """
    if image.shape[0] != image.shape[1]:
        raise ValueError("augment expects square patches")
    return apply_augmentation(image, labels, draw_augmentation(spec, rng))


# class weights -------------------------------------------------------------


def class_counts(label_maps: Iterable[LabelMap | np.ndarray], K: int) -> np.ndarray:
    counts = np.zeros(K, dtype=np.int64)
    for lm in label_maps:
        lab = lm.labels if isinstance(lm, LabelMap) else np.asarray(lm)
        hist = np.bincount(lab.ravel(), minlength=256)
        if hist[K:UNLABELED].any() or hist[UNLABELED + 1 :].any():
            raise ValueError(f"label values >= K={K} present")
        counts += hist[:K]
    return counts


def weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClassError(missing.tolist())
    freq = counts / counts.sum()
    inv = 1.0 / freq
    return inv / inv.sum()


def compute_class_weights(dataset: Iterable[LabelMap | np.ndarray], K: int) -> np.ndarray:
    """Inverse labeled-pixel frequency per class, normalized to sum to 1."""
    return weights_from_counts(class_counts(dataset, K))


# synthetic data ------------------------------------------------------------

SYNTH_CLASSES = ClassTable()


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _texture_background(rng, shape):
    return 0.12 + 0.03 * _smooth_noise(rng, shape, 6)


def _texture_artifact(rng, shape):
    h, w = shape
    big = int(math.ceil(math.hypot(h, w))) + 2
    streak = ndimage.gaussian_filter(rng.standard_normal((big, big)), (0.8, 14), mode="wrap")
    streak = ndimage.rotate(streak, rng.uniform(0, 180), reshape=False, order=1, mode="wrap")
    y0, x0 = (big - h) // 2, (big - w) // 2
    streak = streak[y0 : y0 + h, x0 : x0 + w]
    streak = (streak - streak.mean()) / (streak.std() + 1e-12)
    return 0.62 + 0.18 * np.tanh(streak)


def _texture_meshwork(rng, shape):
    h, w = shape
    period = rng.uniform(9, 13)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warp_y = 2.0 * _smooth_noise(rng, shape, 12)
    warp_x = 2.0 * _smooth_noise(rng, shape, 12)
    dy = ((yy + warp_y) % period) - period / 2
    dx = ((xx + warp_x) % period) - period / 2
    lines = np.maximum(np.exp(-dy**2 / 2.0), np.exp(-dx**2 / 2.0))
    return 0.22 + 0.5 * lines


def _blobs(rng, shape, density, radius_lo, radius_hi, ring_width=None):
    h, w = shape
    n = rng.poisson(density * h * w)
    cy, cx = rng.uniform(0, h, n), rng.uniform(0, w, n)
    radii = rng.uniform(radius_lo, radius_hi, n)
    out = np.zeros(shape, dtype=np.float64)
    for y, x, r in zip(cy, cx, radii):
        reach = int(r + 3)
        y0, y1 = max(int(y) - reach, 0), min(int(y) + reach + 1, h)
        x0, x1 = max(int(x) - reach, 0), min(int(x) + reach + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d = np.hypot(yy - y, xx - x)
        if ring_width is None:
            val = np.clip(r - d + 0.5, 0, 1)
        else:
            val = np.clip(ring_width / 2 - np.abs(d - r) + 0.5, 0, 1)
        out[y0:y1, x0:x1] = np.maximum(out[y0:y1, x0:x1], val)
    return out


def _texture_nested(rng, shape):
    return 0.32 + 0.58 * _blobs(rng, shape, 1 / 70, 4.5, 7.0)


def _texture_ring(rng, shape):
    return 0.16 + 0.62 * _blobs(rng, shape, 1 / 200, 6.0, 8.5, ring_width=2.0)


def _texture_aspecific(rng, shape):
    speck = ndimage.gaussian_filter(rng.uniform(0, 1, shape), 0.6)
    speck = (speck - speck.mean()) / (speck.std() + 1e-12)
    return 0.5 + 0.22 * speck


TEXTURES = (
    _texture_background,
    _texture_artifact,
    _texture_meshwork,
    _texture_nested,
    _texture_ring,
    _texture_aspecific,
)


def synthetic_pair(rng: np.random.Generator, size: int = 512, labeled_fraction: float = 1.0):
    """One procedural (Mosaic, LabelMap) pair over the six-class texture world."""
    shape = (size, size)
    K = len(TEXTURES)
    scale = size / 16
    fields = np.stack([_smooth_noise(rng, shape, scale) for _ in range(K)])
    # per-image class prevalence varies, as in real mosaics
    fields += rng.normal(0, 0.6, size=K)[:, None, None]
    region = np.argmax(fields, axis=0).astype(np.uint8)
    img = np.empty(shape, dtype=np.float64)
    for k, tex in enumerate(TEXTURES):
        sel = region == k
        if sel.any():
            img[sel] = tex(rng, shape)[sel]
    img += 0.02 * rng.standard_normal(shape)
    img = np.clip(img, 0.0, 1.0)

    labels = region.copy()
    if labeled_fraction < 1.0:
        keep = _smooth_noise(rng, shape, scale * 0.75)
        thresh = np.quantile(keep, 1.0 - labeled_fraction)
        labels[keep < thresh] = UNLABELED
    return Mosaic(img.astype(np.float32)), LabelMap(labels, num_classes=K)


def generate_synthetic(
    seed: int, count: int, size: int = 512, labeled_fraction: float = 0.6
) -> list[tuple[Mosaic, LabelMap]]:
    if size < 64:
        raise ValueError("size must be >= 64")
    if not 0 < labeled_fraction <= 1:
        raise ValueError("labeled_fraction must be in (0, 1]")
    return [
        synthetic_pair(np.random.default_rng([seed, i]), size, labeled_fraction)
        for i in range(count)
    ]


def materialize(pairs, out_dir: str | Path, table: ClassTable = SYNTH_CLASSES, prefix: str = "img"):
    """Write pairs as 16-bit PNG mosaics and indexed PNG labels plus a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (mosaic, labels) in enumerate(pairs):
        ip = out / "images" / f"{prefix}_{i:04d}.png"
        lp = out / "labels" / f"{prefix}_{i:04d}.png"
        write_mosaic(ip, mosaic)
        write_labels(lp, labels, table)
        rows.append((ip, lp))
    write_manifest(out / "manifest.txt", rows)
    return out / "manifest.txt"


@dataclass
class PatchDataset:
    """Epoch-wise patch stream over a list of (Mosaic, LabelMap) pairs."""

    pairs: list
    patch: PatchSpec = field(default_factory=PatchSpec)
    augment: AugmentSpec | None = field(default_factory=AugmentSpec)
    seed: int = 0

    def epoch(self, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, epoch])
        out = []
        for mosaic, labels in self.pairs:
            for img, lab in extract_patches(mosaic, labels, self.patch, rng):
                if self.augment is not None:
                    img, lab = augment(img, lab, self.augment, rng)
                out.append((img, lab))
        order = rng.permutation(len(out))
        return [out[i] for i in order]
