"""Encoder, decoder, discriminator and feature extractor at configurable toy scale.

Images are ``(B, C, H, W)`` tensors nominally in [0, 1]. All convolutions use
LeakyReLU(0.2), no normalization layers, strided 4x4 convs to downsample and
nearest-neighbour upsampling followed by a 3x3 conv to upsample.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidInputError

VALID_FACTORS = (4, 8, 16)


def _levels(factor: int) -> int:
    if factor not in VALID_FACTORS:
        raise InvalidInputError(f"downsample factor must be one of {VALID_FACTORS}, got {factor}")
    return int(math.log2(factor))


def _widths(channels: Sequence[int], levels: int) -> list[int]:
    channels = list(channels)
    if len(channels) < levels:
        channels += [channels[-1]] * (levels - len(channels))
    return channels[:levels]


def _check_image(x: Tensor, channels: int, multiple: int, what: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise InvalidInputError(f"{what} expects (B, {channels}, H, W), got {tuple(x.shape)}")
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise InvalidInputError(
            f"{what} needs spatial dims divisible by {multiple}, got {tuple(x.shape[2:])}"
        )


def _act() -> nn.Module:
    return nn.LeakyReLU(0.2)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            _act(),
            nn.Conv2d(channels, channels, 3, padding=1),
            _act(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class Encoder(nn.Module):
    """Image to continuous latent grid, downsampling by ``factor``."""

    def __init__(
        self,
        in_channels: int = 3,
        latent_dim: int = 32,
        channels: Sequence[int] = (32, 64, 128),
        factor: int = 8,
    ):
        super().__init__()
        levels = _levels(factor)
        widths = _widths(channels, levels)
        self.in_channels = in_channels
        self.latent_dim = latent_dim
        self.factor = factor
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        down = []
        prev = widths[0]
        for width in widths:
            down += [ResBlock(prev), nn.Conv2d(prev, width, 4, stride=2, padding=1)]
            prev = width
        self.down = nn.Sequential(*down)
        self.head = nn.Sequential(ResBlock(prev), _act(), nn.Conv2d(prev, latent_dim, 1))

    def forward(self, image: Tensor) -> Tensor:
        _check_image(image, self.in_channels, self.factor, "encoder")
        return self.head(self.down(self.stem(image)))


class RestorationEncoder(Encoder):
    """Encoder with an extra shortcut from shallow stem features to the latent."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        stem_width = self.stem.out_channels
        self.shortcut = nn.Sequential(
            nn.AvgPool2d(self.factor), nn.Conv2d(stem_width, self.latent_dim, 1)
        )
        # Starts as the plain encoder path.
        nn.init.zeros_(self.shortcut[1].weight)
        nn.init.zeros_(self.shortcut[1].bias)

    def forward(self, image: Tensor) -> Tensor:
        _check_image(image, self.in_channels, self.factor, "restoration encoder")
        shallow = self.stem(image)
        return self.head(self.down(shallow)) + self.shortcut(shallow)


class Decoder(nn.Module):
    """Latent grid to RGB image, upsampling by ``factor``.

    Output is unbounded; callers clamp at evaluation time.
    """

    def __init__(
        self,
        latent_dim: int = 32,
        channels: Sequence[int] = (32, 64, 128),
        factor: int = 8,
        out_channels: int = 3,
    ):
        super().__init__()
        levels = _levels(factor)
        widths = _widths(channels, levels)[::-1]
        self.latent_dim = latent_dim
        self.factor = factor
        self.stem = nn.Sequential(nn.Conv2d(latent_dim, widths[0], 3, padding=1), ResBlock(widths[0]))
        up = []
        prev = widths[0]
        for width in widths:
            up += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(prev, width, 3, padding=1),
                ResBlock(width),
            ]
            prev = width
        self.up = nn.Sequential(*up)
        self.head = nn.Sequential(_act(), nn.Conv2d(prev, out_channels, 3, padding=1))

    def forward(self, latent: Tensor) -> Tensor:
        _check_image(latent, self.latent_dim, 1, "decoder")
        return self.head(self.up(self.stem(latent)))


class PatchDiscriminator(nn.Module):
    """Strided conv stack producing one logit per ``stride x stride`` patch."""

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (32, 64, 128), stride: int = 8):
        super().__init__()
        levels = _levels(stride)
        widths = _widths(channels, levels)
        self.in_channels = in_channels
        self.stride = stride
        layers: list[nn.Module] = []
        prev = in_channels
        for width in widths:
            layers += [nn.Conv2d(prev, width, 4, stride=2, padding=1), _act()]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image: Tensor) -> Tensor:
        _check_image(image, self.in_channels, self.stride, "discriminator")
        return self.net(image)


class FeatureExtractor(nn.Module):
    """Frozen, seeded conv pyramid used as the default perceptual feature map.

    Produces features at latent resolution ``(B, out_dim, H/f, W/f)``. Any
    other frozen module with the same output contract can replace it.
    """

    def __init__(
        self,
        out_dim: int = 64,
        channels: Sequence[int] = (16, 32, 64),
        factor: int = 8,
        seed: int = 0,
        in_channels: int = 3,
    ):
        super().__init__()
        levels = _levels(factor)
        widths = _widths(channels, levels)
        self.factor = factor
        self.out_dim = out_dim
        layers: list[nn.Module] = []
        prev = in_channels
        for width in widths:
            layers += [nn.Conv2d(prev, width, 3, padding=1), nn.ReLU(), nn.Conv2d(width, width, 4, stride=2, padding=1), nn.ReLU()]
            prev = width
        layers.append(nn.Conv2d(prev, out_dim, 1))
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "FeatureExtractor":
        # Always stays in eval mode.
        return super().train(False)

    def forward(self, image: Tensor) -> Tensor:
        _check_image(image, self.net[0].in_channels, self.factor, "feature extractor")
        return self.net(image * 2.0 - 1.0)


class ConvProjection(nn.Module):
    """Trainable 1x1 conv from latent dimension to feature dimension."""

    def __init__(self, latent_dim: int, feature_dim: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(latent_dim, feature_dim, 1, bias=bias)

    def forward(self, latent: Tensor) -> Tensor:
        _check_image(latent, self.conv.in_channels, 1, "conv projection")
        return self.conv(latent)


def encode(image: Tensor, encoder: Encoder) -> Tensor:
    return encoder(image)


def decode(latent: Tensor, decoder: Decoder, clip: bool = False) -> Tensor:
    out = decoder(latent)
    return out.clamp(0.0, 1.0) if clip else out


def discriminate(image: Tensor, discriminator: PatchDiscriminator) -> Tensor:
    return discriminator(image)


def extract_features(image: Tensor, extractor: nn.Module) -> Tensor:
    return extractor(image)


def conv_project(latent: Tensor, projection: ConvProjection) -> Tensor:
    return projection(latent)


def encode_restoration(image: Tensor, encoder: RestorationEncoder) -> Tensor:
    return encoder(image)


def zero_parameters(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def upsample_input(image: Tensor, size: tuple[int, int]) -> Tensor:
    """Bicubic resize used to lift LR inputs to the HR grid before encoding."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return F.interpolate(image, size=size, mode="bicubic", align_corners=False).clamp(0.0, 1.0)
