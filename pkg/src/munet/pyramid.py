"""Dyadic image/label pyramids and the 2x resampling between levels.

Images are downsampled by 2x2 mean pooling, labels by taking the top-left
pixel of every 2x2 block, and probability maps are upsampled bilinearly.
Odd sizes round up; the ragged border is filled by edge replication.
Each operation has a numpy entry point working on the core types and a
tensor twin used inside the network and training loop.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .types import LabelMap, Mosaic, ProbabilityMap, Pyramid


def _check_levels(shape: tuple[int, int], levels: int) -> None:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    need = 2 ** (levels - 1)
    if min(shape) < need:
        raise ValueError(f"image of shape {shape} is too small for {levels} levels (need >= {need})")


def halve_image(px: np.ndarray) -> np.ndarray:
    h, w = px.shape
    px = np.pad(px, ((0, h % 2), (0, w % 2)), mode="edge")
    return px.reshape(px.shape[0] // 2, 2, px.shape[1] // 2, 2).mean(axis=(1, 3))


def downsample_image(img: Mosaic, levels: int) -> list[Mosaic]:
    _check_levels(img.pixels.shape, levels)
    out = [img]
    px = img.pixels.astype(np.float64)
    for m in range(1, levels):
        px = halve_image(px)
        out.append(Mosaic(px, resolution=img.resolution * 2 ** m))
    return out


def downsample_labels(labels: LabelMap, levels: int) -> list[LabelMap]:
    _check_levels(labels.labels.shape, levels)
    out = [labels]
    lab = labels.labels
    for _ in range(1, levels):
        lab = lab[::2, ::2]
        out.append(LabelMap(lab, num_classes=labels.num_classes))
    return out


def build_pyramid(img: Mosaic, labels: LabelMap | None, levels: int) -> Pyramid:
    imgs = downsample_image(img, levels)
    labs = downsample_labels(labels, levels) if labels is not None else None
    return Pyramid(tuple(imgs), tuple(labs) if labs is not None else None)


def upsample_probability(prob: ProbabilityMap, factor: int = 2) -> ProbabilityMap:
    if factor != 2:
        raise ValueError("only 2x upsampling is supported")
    t = torch.from_numpy(np.array(prob.values))[None]
    up = upsample_probs(t)[0].numpy()
    return ProbabilityMap(up)


# tensor twins -----------------------------------------------------------


def downsample_tensor(x: torch.Tensor) -> torch.Tensor:
    """2x2 mean pooling of an ``(N, C, H, W)`` tensor with ceil sizing."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    return F.avg_pool2d(x, kernel_size=2, stride=2)


def image_pyramid(x: torch.Tensor, levels: int) -> list[torch.Tensor]:
    _check_levels(tuple(x.shape[-2:]), levels)
    out = [x]
    for _ in range(1, levels):
        out.append(downsample_tensor(out[-1]))
    return out


def label_pyramid(labels: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Top-left subsampling of an integer label tensor ``(..., H, W)``."""
    out = [labels]
    for _ in range(1, levels):
        out.append(out[-1][..., ::2, ::2])
    return out


def upsample_probs(p: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling of ``(N, K, H, W)`` probabilities, renormalized per pixel."""
    up = F.interpolate(p, scale_factor=2, mode="bilinear", align_corners=False)
    return up / up.sum(dim=1, keepdim=True)
