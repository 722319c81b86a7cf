"""Shared data model: images, label maps, probability fields and configs.

Arrays are stored row-major as ``(height, width)`` for images and labels and
channel-first ``(K, height, width)`` for probability fields, matching the
tensor layout used by the network.  All containers are frozen and their
arrays are marked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNLABELED = 255
"""Reserved label value for pixels without expert annotation."""

DEFAULT_CLASS_NAMES = (
    "background",
    "artifact",
    "meshwork",
    "nested",
    "ring",
    "aspecific",
)

DEFAULT_PALETTE = (
    "#202020",  # background
    "#e41a1c",  # artifact
    "#377eb8",  # meshwork
    "#4daf4a",  # nested
    "#984ea3",  # ring
    "#ff7f00",  # aspecific
    "#ffff33",  # unlabeled
)


class InvalidLabelError(ValueError):
    """A label map contains a class index outside ``0..K-1``."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mosaic:
    """Single-channel intensity image with values in [0, 1]."""

    pixels: np.ndarray
    resolution: float = 4.0  # micrometers per pixel

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"mosaic must be 2D, got shape {px.shape}")
        if px.size and (np.nanmin(px) < 0.0 or np.nanmax(px) > 1.0 or np.isnan(px).any()):
            raise ValueError("mosaic intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices; ``UNLABELED`` marks unannotated pixels."""

    labels: np.ndarray
    num_classes: int = 6

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"label map must be 2D, got shape {lab.shape}")
        if self.num_classes < 1 or self.num_classes >= UNLABELED:
            raise ValueError(f"num_classes must be in [1, {UNLABELED - 1}]")
        lab = lab.astype(np.uint8)
        bad = (lab != UNLABELED) & (lab >= self.num_classes)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise InvalidLabelError(
                f"label {int(lab[r, c])} at pixel (row={r}, col={c}) "
                f"is not < K={self.num_classes}"
            )
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.labels != UNLABELED


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    palette: tuple[str, ...] = DEFAULT_PALETTE

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "palette", tuple(self.palette))
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if len(self.palette) != len(self.names) + 1:
            raise ValueError("palette needs one color per class plus one for UNLABELED")
        if len(set(c.lower() for c in self.palette)) != len(self.palette):
            raise ValueError("palette colors must be distinct")
        for c in self.palette:
            _hex_to_rgb(c)

    @property
    def K(self) -> int:
        return len(self.names)

    def rgb_palette(self) -> np.ndarray:
        """``(K+1, 3)`` uint8 array; the last row is the UNLABELED color."""
        return np.array([_hex_to_rgb(c) for c in self.palette], dtype=np.uint8)


def _hex_to_rgb(code: str) -> tuple[int, int, int]:
    s = code.lstrip("#")
    if len(s) != 6:
        raise ValueError(f"bad palette color {code!r}")
    return int(s[0:2], 16), int(s[2:4], 16), int(s[4:6], 16)


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel distribution over K classes, stored ``(K, H, W)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"probability map must be (K, H, W), got {v.shape}")
        if v.size:
            if v.min() < -1e-7 or v.max() > 1 + 1e-7:
                raise ValueError("probabilities must lie in [0, 1]")
            if np.abs(v.sum(axis=0) - 1.0).max() > 1e-5:
                raise ValueError("probabilities must sum to 1 per pixel")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def argmax(self) -> LabelMap:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return LabelMap(np.argmax(self.values, axis=0).astype(np.uint8), num_classes=self.K)


@dataclass(frozen=True)
class Pyramid:
    images: tuple[Mosaic, ...]
    labels: tuple[LabelMap, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != len(self.images):
                raise ValueError("pyramid images and labels differ in level count")
            for m, (img, lab) in enumerate(zip(self.images, self.labels)):
                if img.pixels.shape != lab.labels.shape:
                    raise ValueError(f"level {m}: image and label shapes differ")
        for m in range(1, len(self.images)):
            prev, cur = self.images[m - 1].pixels.shape, self.images[m].pixels.shape
            want = tuple(-(-d // 2) for d in prev)
            if cur != want:
                raise ValueError(f"level {m} has shape {cur}, expected {want}")

    @property
    def M(self) -> int:
        return len(self.images)


def default_beta(M: int) -> tuple[float, ...]:
    """Level weights: 0.8/0.16/0.04 for three levels, geometric 5:1 otherwise."""
    if M == 3:
        return (0.8, 0.16, 0.04)
    raw = np.array([5.0 ** -m for m in range(M)])
    raw /= raw.sum()
    return tuple(float(b) for b in raw)


@dataclass(frozen=True)
class LossConfig:
    alpha: tuple[float, ...]
    beta: tuple[float, ...] = (0.8, 0.16, 0.04)
    epsilon: float = 1e-5
    factor_two: bool = False

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        beta = tuple(float(b) for b in self.beta)
        if any(a < 0 for a in alpha):
            raise ValueError("alpha must be nonnegative")
        if any(b < 0 for b in beta):
            raise ValueError("beta must be nonnegative")
        if abs(sum(beta) - 1.0) > 1e-9:
            raise ValueError(f"beta must sum to 1, got {sum(beta)!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def K(self) -> int:
        return len(self.alpha)

    @property
    def M(self) -> int:
        return len(self.beta)

    @classmethod
    def uniform(cls, K: int, M: int, **kwargs) -> "LossConfig":
        return cls(alpha=(1.0 / K,) * K, beta=kwargs.pop("beta", default_beta(M)), **kwargs)


def default_depths(M: int, max_depth: int = 4) -> tuple[int, ...]:
    """Encoder depth per level, shrinking by one per coarser level."""
    return tuple(max(max_depth - m, 1) for m in range(M))


@dataclass(frozen=True)
class ModelConfig:
    M: int = 3
    K: int = 6
    base_channels: int = 24
    depths: tuple[int, ...] | None = None
    input_window: int = 256

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        depths = default_depths(self.M) if self.depths is None else tuple(int(d) for d in self.depths)
        if len(depths) != self.M or min(depths) < 1:
            raise ValueError(f"need {self.M} positive depths, got {depths}")
        object.__setattr__(self, "depths", depths)
        if self.input_window % (2 ** self.max_depth):
            raise ValueError(
                f"input_window {self.input_window} is not divisible by 2^{self.max_depth}"
            )
        for m, d in enumerate(depths):
            side = self.input_window >> m
            if side << m != self.input_window or side % (2 ** d):
                raise ValueError(f"level {m} side {self.input_window / 2 ** m} not divisible by 2^{d}")

    @property
    def max_depth(self) -> int:
        return max(self.depths)

    def depth_of_level(self, m: int) -> int:
        return self.depths[m]

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "K": self.K,
            "base_channels": self.base_channels,
            "depths": list(self.depths),
            "input_window": self.input_window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            M=int(d["M"]),
            K=int(d["K"]),
            base_channels=int(d["base_channels"]),
            depths=tuple(d["depths"]),
            input_window=int(d["input_window"]),
        )


def one_hot_expand(labels: LabelMap | np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Expand a label map into a ``(K, H, W)`` one-hot target and ``(H, W)`` mask.

    Unlabeled pixels get an all-zero target vector and a zero mask entry.
    """
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    mask = lab != UNLABELED
    bad = mask & (lab >= K)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise InvalidLabelError(f"label {int(lab[r, c])} at pixel (row={r}, col={c}) is not < K={K}")
    target = (lab[None, :, :] == np.arange(K)[:, None, None]).astype(np.float64)
    return target, mask.astype(np.float64)


def collapse(target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Inverse of :func:`one_hot_expand` (argmax on labeled pixels)."""
    out = np.full(mask.shape, UNLABELED, dtype=np.uint8)
    keep = mask.astype(bool)
    out[keep] = np.argmax(target, axis=0)[keep]
    return out


__all__ = [
    "UNLABELED",
    "InvalidLabelError",
    "Mosaic",
    "LabelMap",
    "ClassTable",
    "ProbabilityMap",
    "Pyramid",
    "LossConfig",
    "ModelConfig",
    "one_hot_expand",
    "collapse",
    "default_beta",
    "default_depths",
]
