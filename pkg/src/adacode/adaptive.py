"""Multi-codebook quantization and per-location blending."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor, nn

from .codebook import VectorCodebook, quantize
from .errors import InvalidInputError


class BasisSet(nn.Module):
    """Ordered collection of K basis codebooks sharing one code dimension."""

    def __init__(self, codebooks: Sequence[VectorCodebook]):
        super().__init__()
        if not codebooks:
            raise InvalidInputError("a basis set needs at least one codebook")
        dims = {cb.code_dim for cb in codebooks}
        if len(dims) != 1:
            raise InvalidInputError(f"basis codebooks disagree on code dimension: {sorted(dims)}")
        labels = [cb.class_label for cb in codebooks]
        if len(set(labels)) != len(labels):
            raise InvalidInputError(f"duplicate class labels in basis set: {labels}")
        self.codebooks = nn.ModuleList(codebooks)

    def __len__(self) -> int:
        return len(self.codebooks)

    def __getitem__(self, k: int) -> VectorCodebook:
        return self.codebooks[k]

    @property
    def labels(self) -> list[str]:
        return [cb.class_label for cb in self.codebooks]

    @property
    def code_dim(self) -> int:
        return self.codebooks[0].code_dim

    def freeze(self) -> "BasisSet":
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def quantize_all(latent: Tensor, basis: BasisSet) -> list[tuple[Tensor, Tensor]]:
    """Quantize ``latent`` against every codebook in ``basis``, in order."""
    if latent.dim() != 4 or latent.shape[1] != basis.code_dim:
        raise InvalidInputError(
            f"latent shape {tuple(latent.shape)} incompatible with code dimension {basis.code_dim}"
        )
    return [quantize(latent, cb.entries) for cb in basis.codebooks]


def combine(quantized: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Blend K quantized grids with a ``(B, K, h, w)`` weight map.

    No normalization happens here, so the blend is linear in ``weights``.
    """
    if not quantized:
        raise InvalidInputError("need at least one quantized grid")
    shape = quantized[0].shape
    if any(q.shape != shape for q in quantized):
        raise InvalidInputError("quantized grids must share a shape")
    b, _, h, w = shape
    if weights.shape != (b, len(quantized), h, w):
        raise InvalidInputError(
            f"weight map shape {tuple(weights.shape)} does not match {(b, len(quantized), h, w)}"
        )
    stacked = torch.stack(list(quantized), dim=1)
    return (weights.unsqueeze(2) * stacked).sum(dim=1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within non-overlapping square windows."""

    def __init__(self, dim: int, heads: int, window: int, shift: int = 0):
        super().__init__()
        if dim % heads:
            raise InvalidInputError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.window = window
        self.shift = shift
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, h, w, C)
        b, h, w, c = x.shape
        if h % self.window == 0 and w % self.window == 0:
            ws_h = ws_w = self.window
        else:
            ws_h, ws_w = h, w
        shift = self.shift if (ws_h < h or ws_w < w) else 0
        if shift:
            # cyclic shift, no boundary mask
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        windows = (
            x.view(b, h // ws_h, ws_h, w // ws_w, ws_w, c)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(-1, ws_h * ws_w, c)
        )
        n = windows.shape[1]
        qkv = self.qkv(windows).view(-1, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(-1, n, c)
        out = self.proj(out)
        out = (
            out.view(b, h // ws_h, w // ws_w, ws_h, ws_w, c)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b, h, w, c)
        )
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        return out


class ResidualAttentionBlock(nn.Module):
    """Attention layer and MLP, then a 3x3 conv, wrapped in a residual."""

    def __init__(self, dim: int, heads: int, window: int, shift: int = 0, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, shift)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        t = x.permute(0, 2, 3, 1)
        t = t + self.attn(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return x + self.conv(t.permute(0, 3, 1, 2))


class WeightPredictor(nn.Module):
    """Maps a continuous latent grid to a softmax-normalized K-channel weight map."""

    def __init__(
        self,
        code_dim: int,
        num_bases: int,
        dim: int = 32,
        depth: int = 4,
        heads: int = 2,
        window: int = 4,
    ):
        super().__init__()
        self.code_dim = code_dim
        self.num_bases = num_bases
        self.embed = nn.Conv2d(code_dim, dim, 1)
        self.blocks = nn.Sequential(
            *[
                ResidualAttentionBlock(dim, heads, window, shift=(window // 2) * (i % 2))
                for i in range(depth)
            ]
        )
        self.head = nn.Conv2d(dim, num_bases, 1)

    def logits(self, latent: Tensor) -> Tensor:
        if latent.dim() != 4 or latent.shape[1] != self.code_dim:
            raise InvalidInputError(
                f"weight predictor expects (B, {self.code_dim}, h, w), got {tuple(latent.shape)}"
            )
        return self.head(self.blocks(self.embed(latent)))

    def forward(self, latent: Tensor) -> Tensor:
        return F.softmax(self.logits(latent), dim=1)


def predict_weights(latent: Tensor, predictor: WeightPredictor) -> Tensor:
    return predictor(latent)


def save_weight_maps(weights: Tensor, out_dir: str | Path, prefix: str = "weight") -> list[Path]:
    """Write each channel of a single ``(K, h, w)`` or ``(1, K, h, w)`` map as a grayscale PNG."""
    if weights.dim() == 4:
        weights = weights[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, channel in enumerate(weights.detach().cpu().clamp(0, 1)):
        arr = np.round(channel.double().numpy() * 255.0).astype(np.uint8)
        path = out_dir / f"{prefix}_{k}.png"
        Image.fromarray(arr, mode="L").save(path)
        paths.append(path)
    return paths
