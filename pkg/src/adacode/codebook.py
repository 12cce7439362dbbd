"""Single-codebook vector quantization.

Latent grids are channel-first tensors of shape ``(B, n_z, h, w)``; index
grids are integer tensors of shape ``(B, h, w)``.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidInputError


class VectorCodebook(nn.Module):
    """A learnable ``N x n_z`` code table tied to one super-class label."""

    def __init__(self, num_codes: int, code_dim: int, class_label: str):
        super().__init__()
        if num_codes < 1 or code_dim < 1:
            raise InvalidInputError(f"codebook shape must be positive, got {num_codes}x{code_dim}")
        if not class_label:
            raise InvalidInputError("class_label must be non-empty")
        self.class_label = class_label
        self.entries = nn.Parameter(torch.empty(num_codes, code_dim))
        bound = 1.0 / num_codes
        nn.init.uniform_(self.entries, -bound, bound)

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]

    def forward(self, latent: Tensor) -> tuple[Tensor, Tensor]:
        return quantize(latent, self.entries)

    def extra_repr(self) -> str:
        return f"label={self.class_label!r}, num_codes={self.num_codes}, code_dim={self.code_dim}"


def _entries(codebook: VectorCodebook | Tensor) -> Tensor:
    return codebook.entries if isinstance(codebook, VectorCodebook) else codebook


def quantize(latent: Tensor, codebook: VectorCodebook | Tensor) -> tuple[Tensor, Tensor]:
    """Replace every spatial vector by its nearest codebook entry.

    Distance is squared Euclidean; ties resolve to the lowest index. The
    returned grid is gathered from the codebook, so gradients reach the
    entries but not ``latent``.

    Returns:
        ``(quantized, indices)`` with shapes ``(B, n_z, h, w)`` and ``(B, h, w)``.
    """
    entries = _entries(codebook)
    if latent.dim() != 4:
        raise InvalidInputError(f"latent must be (B, n_z, h, w), got shape {tuple(latent.shape)}")
    if latent.shape[1] != entries.shape[1]:
        raise InvalidInputError(
            f"latent has {latent.shape[1]} channels but codebook dimension is {entries.shape[1]}"
        )
    b, c, h, w = latent.shape
    flat = latent.detach().permute(0, 2, 3, 1).reshape(-1, c)
    codes = entries.detach()
    # Expanded form is cheaper but rounds differently from the direct
    # difference; the direct form keeps ties and exact matches exact.
    dist = (flat.unsqueeze(1) - codes.unsqueeze(0)).pow(2).sum(-1)
    # torch.argmin returns the first minimal index.
    indices = dist.argmin(dim=1)
    quantized = F.embedding(indices, entries).view(b, h, w, c).permute(0, 3, 1, 2)
    return quantized.contiguous(), indices.view(b, h, w)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, continuous, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(continuous: Tensor, quantized: Tensor) -> Tensor:
    """Forward value of ``quantized`` with an identity gradient to ``continuous``.

    Gradients match ``continuous + sg(quantized - continuous)``, but the
    forward value is ``quantized`` bit for bit instead of up to rounding.
    """
    if continuous.shape != quantized.shape:
        raise InvalidInputError(
            f"shape mismatch: {tuple(continuous.shape)} vs {tuple(quantized.shape)}"
        )
    return _StraightThrough.apply(continuous, quantized)


def vq_loss(continuous: Tensor, quantized: Tensor, beta: float = 0.25) -> Tensor:
    """Codebook term plus ``beta``-weighted commitment term, mean-reduced.

    The codebook term only moves ``quantized``; the commitment term only
    moves ``continuous``.
    """
    if continuous.shape != quantized.shape:
        raise InvalidInputError(
            f"shape mismatch: {tuple(continuous.shape)} vs {tuple(quantized.shape)}"
        )
    if beta < 0:
        raise InvalidInputError(f"beta must be non-negative, got {beta}")
    codebook_term = F.mse_loss(quantized, continuous.detach())
    commitment_term = F.mse_loss(continuous, quantized.detach())
    return codebook_term + beta * commitment_term


def code_usage(indices: Tensor, num_codes: int) -> Tensor:
    """Histogram of code indices, length ``num_codes``."""
    flat = indices.reshape(-1).long()
    if flat.numel() and (flat.min() < 0 or flat.max() >= num_codes):
        raise InvalidInputError(f"indices must lie in [0, {num_codes})")
    return torch.bincount(flat, minlength=num_codes)


def visualize_code(
    codebook: VectorCodebook | Tensor,
    index: int,
    decoder: Callable[[Tensor], Tensor],
    tile: int = 4,
) -> Tensor:
    """Decode a ``tile x tile`` grid filled with one code entry.

    Returns a ``(3, tile*f, tile*f)`` image clipped to [0, 1].
    """
    entries = _entries(codebook)
    if not 0 <= index < entries.shape[0]:
        raise InvalidInputError(f"code index {index} out of range [0, {entries.shape[0]})")
    grid = entries[index].detach().view(1, -1, 1, 1).expand(1, -1, tile, tile).contiguous()
    with torch.no_grad():
        patch = decoder(grid)
    factor = getattr(decoder, "factor", None)
    if factor is not None and patch.shape[-1] != tile * factor:
        raise InvalidInputError(
            f"decoder produced side {patch.shape[-1]}, expected {tile * factor}"
        )
    return patch[0].clamp(0.0, 1.0)
