"""Nested multiresolution U-Net.

Level ``m`` of an ``M``-level network sees the image downsampled ``m`` times.
The deepest level runs on the image alone; every finer level receives its
image concatenated with the 2x-upsampled class probabilities of the level
below.  With ``M == 1`` the network is a single plain U-Net.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from .pyramid import image_pyramid, upsample_probs
from .types import ModelConfig


class BConv(nn.Module):
    """3x3 conv -> batch norm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(out_ch)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(BConv(in_ch, out_ch), BConv(out_ch, out_ch))


class UNet(nn.Module):
    """Plain U-Net with ``depth`` pooling stages, returning K-channel logits."""

    def __init__(self, in_channels: int, num_classes: int, base: int = 24, depth: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.depth = depth
        widths = [base * 2 ** d for d in range(depth + 1)]
        self.encoders = nn.ModuleList([DoubleConv(in_channels, widths[0])])
        for d in range(1, depth + 1):
            self.encoders.append(DoubleConv(widths[d - 1], widths[d]))
        self.pool = nn.MaxPool2d(2, 2)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for d in range(depth, 0, -1):
            self.ups.append(nn.ConvTranspose2d(widths[d], widths[d - 1], 2, stride=2))
            self.decoders.append(DoubleConv(widths[d], widths[d - 1]))
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 2 ** self.depth or w % 2 ** self.depth:
            raise ValueError(f"input {h}x{w} is not divisible by 2^{self.depth}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)


class MUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        M, K = config.M, config.K
        self.subnets = nn.ModuleList(
            UNet(1 + (K if m < M - 1 else 0), K, config.base_channels, config.depth_of_level(m))
            for m in range(M)
        )

    def forward_logits(self, images: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Per-level logits ``[L0, ..., L_{M-1}]`` from an image pyramid.

        Evaluation runs deepest-first; each finer level is conditioned on the
        softmax of the level below.
        """
        M = self.config.M
        if len(images) != M:
            raise ValueError(f"expected {M} pyramid levels, got {len(images)}")
        for m in range(1, M):
            want = tuple(-(-s // 2) for s in images[m - 1].shape[-2:])
            if tuple(images[m].shape[-2:]) != want:
                raise ValueError(
                    f"pyramid level {m} has size {tuple(images[m].shape[-2:])}, expected {want}"
                )
        logits: list[torch.Tensor] = [None] * M  # type: ignore[list-item]
        logits[M - 1] = self.subnets[M - 1](images[M - 1])
        for k in range(M - 2, -1, -1):
            prior = upsample_probs(torch.softmax(logits[k + 1], dim=1))
            prior = prior[..., : images[k].shape[-2], : images[k].shape[-1]]
            logits[k] = self.subnets[k](torch.cat([images[k], prior], dim=1))
        return logits

    def forward(self, images: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [torch.softmax(z, dim=1) for z in self.forward_logits(images)]

    def predict_window(self, x: torch.Tensor) -> torch.Tensor:
        """Full-resolution probabilities for an ``(N, 1, H, W)`` batch of windows."""
        return self.forward(image_pyramid(x, self.config.M))[0]


def _init_weights(model: nn.Module, generator: torch.Generator) -> None:
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            w = mod.weight
            # fan-in over (in_ch, kh, kw); ConvTranspose stores weights as (in, out, kh, kw)
            if isinstance(mod, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] // (mod.stride[0] * mod.stride[1])
            else:
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                w.copy_(torch.randn(w.shape, generator=generator, dtype=w.dtype) * std)
                if mod.bias is not None:
                    mod.bias.zero_()
        elif isinstance(mod, nn.BatchNorm2d):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)


def build_munet(config: ModelConfig | None = None, seed: int = 0) -> MUNet:
    model = MUNet(config or ModelConfig())
    gen = torch.Generator().manual_seed(seed)
    _init_weights(model, gen)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def unet_parameter_count(in_channels: int, num_classes: int, base: int, depth: int) -> int:
    """Closed-form count of :class:`UNet` trainable parameters."""

    def bconv(i, o):
        return 9 * i * o + 2 * o  # conv without bias + BN scale/shift

    def double(i, o):
        return bconv(i, o) + bconv(o, o)

    widths = [base * 2 ** d for d in range(depth + 1)]
    n = double(in_channels, widths[0])
    for d in range(1, depth + 1):
        n += double(widths[d - 1], widths[d])
        n += 4 * widths[d] * widths[d - 1] + widths[d - 1]  # transposed conv with bias
        n += double(widths[d], widths[d - 1])
    n += widths[0] * num_classes + num_classes
    return n


def munet_parameter_count(config: ModelConfig) -> int:
    return sum(
        unet_parameter_count(
            1 + (config.K if m < config.M - 1 else 0),
            config.K,
            config.base_channels,
            config.depth_of_level(m),
        )
        for m in range(config.M)
    )
