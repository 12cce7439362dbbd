"""Synthetic degradations, inpainting masks, label grouping and toy textures.

Single images are ``(3, H, W)`` float tensors in [0, 1]; batched helpers
accept ``(B, 3, H, W)`` as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .errors import InvalidInputError

RESAMPLE_MODES = ("bicubic", "bilinear", "nearest")
HOLE_VALUE = 0.5


@dataclass(frozen=True)
class DegradationSpec:
    blur_sigma: float = 1.0
    scale: int = 4
    noise_std: float = 0.02
    resample: str = "bicubic"
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise InvalidInputError("blur_sigma and noise_std must be non-negative")
        if self.scale not in (1, 2, 4):
            raise InvalidInputError(f"scale must be 1, 2 or 4, got {self.scale}")
        if self.resample not in RESAMPLE_MODES:
            raise InvalidInputError(f"resample must be one of {RESAMPLE_MODES}")


@dataclass(frozen=True)
class MaskSpec:
    num_strokes: int = 4
    max_vertices: int = 6
    min_width: int = 3
    max_width: int = 7
    max_length: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_strokes < 0 or self.max_vertices < 1:
            raise InvalidInputError("num_strokes must be >= 0 and max_vertices >= 1")
        if not 1 <= self.min_width <= self.max_width:
            raise InvalidInputError("stroke widths must satisfy 1 <= min_width <= max_width")


@dataclass
class LabeledPatch:
    patch: Tensor
    super_class: str
    source: str = ""


def _gaussian_kernel(sigma: float, dtype: torch.dtype) -> Tensor:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(image: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur with reflect padding."""
    if sigma == 0:
        return image
    batched = image if image.dim() == 4 else image.unsqueeze(0)
    c = batched.shape[1]
    k = _gaussian_kernel(sigma, batched.dtype)
    r = k.numel() // 2
    pad_mode = "reflect" if min(batched.shape[-2:]) > r else "replicate"
    out = F.pad(batched, (r, r, 0, 0), mode=pad_mode)
    out = F.conv2d(out, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    out = F.pad(out, (0, 0, r, r), mode=pad_mode)
    out = F.conv2d(out, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return out if image.dim() == 4 else out[0]


def degrade(hr: Tensor, spec: DegradationSpec) -> Tensor:
    """Blur, downsample, add seeded Gaussian noise, clip to [0, 1]."""
    h, w = hr.shape[-2:]
    if h % spec.scale or w % spec.scale:
        raise InvalidInputError(f"image size {(h, w)} not divisible by scale {spec.scale}")
    out = gaussian_blur(hr, spec.blur_sigma)
    if spec.scale != 1:
        batched = out if out.dim() == 4 else out.unsqueeze(0)
        size = (h // spec.scale, w // spec.scale)
        if spec.resample == "nearest":
            batched = F.interpolate(batched, size=size, mode="nearest")
        else:
            batched = F.interpolate(batched, size=size, mode=spec.resample, align_corners=False, antialias=True)
        out = batched if out.dim() == 4 else batched[0]
    if spec.noise_std > 0:
        gen = torch.Generator().manual_seed(spec.seed)
        noise = torch.randn(out.shape, generator=gen, dtype=torch.float64).to(out.dtype)
        out = out + spec.noise_std * noise
    return out.clamp(0.0, 1.0)


def generate_mask(spec: MaskSpec, dims: tuple[int, int]) -> np.ndarray:
    """Random free-form polyline mask, 1 marks a hole.

    Each stroke starts at a random point and takes up to ``max_vertices``
    segments of random angle and length (at most ``max_length`` times the
    longer side), rasterized with a random brush width.
    """
    h, w = dims
    if h < 1 or w < 1:
        raise InvalidInputError(f"mask dims must be positive, got {dims}")
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((h, w), dtype=np.uint8)
    longest = max(h, w)
    for _ in range(spec.num_strokes):
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        width = int(rng.integers(spec.min_width, spec.max_width + 1))
        for _ in range(int(rng.integers(1, spec.max_vertices + 1))):
            angle = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.1, spec.max_length) * longest
            nx = float(np.clip(x + length * np.cos(angle), 0, w - 1))
            ny = float(np.clip(y + length * np.sin(angle), 0, h - 1))
            cv2.line(mask, (int(round(x)), int(round(y))), (int(round(nx)), int(round(ny))), 1, width)
            x, y = nx, ny
    return mask


def apply_mask(image: Tensor, mask: np.ndarray | Tensor) -> Tensor:
    """Fill hole pixels (mask == 1) with neutral gray."""
    m = torch.as_tensor(np.asarray(mask), dtype=image.dtype)
    if tuple(m.shape) != tuple(image.shape[-2:]):
        raise InvalidInputError(f"mask shape {tuple(m.shape)} does not match image {tuple(image.shape[-2:])}")
    return torch.where(m.bool(), torch.full_like(image, HOLE_VALUE), image)


def inpainting_input(image: Tensor, mask: np.ndarray | Tensor) -> Tensor:
    """Masked image with the mask appended as a fourth channel."""
    m = torch.as_tensor(np.asarray(mask), dtype=image.dtype)
    masked = apply_mask(image, mask)
    if image.dim() == 4:
        return torch.cat([masked, m.expand(image.shape[0], 1, *m.shape)], dim=1)
    return torch.cat([masked, m.unsqueeze(0)], dim=0)


# --- label files -----------------------------------------------------------


def read_label_file(path: str | Path) -> list[tuple[str, str]]:
    """Parse ``<relative_path> <fine_label>`` lines."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(maxsplit=1)
        if len(parts) != 2:
            raise InvalidInputError(f"{path}:{lineno}: expected '<path> <label>'")
        entries.append((parts[0], parts[1]))
    return entries


def read_mapping_file(path: str | Path) -> dict[str, str]:
    """Parse ``<fine_label> <super_class>`` lines."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InvalidInputError(f"{path}:{lineno}: expected '<fine_label> <super_class>'")
        mapping[parts[0]] = parts[1]
    return mapping


def write_label_file(path: str | Path, entries: Iterable[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{p} {label}\n" for p, label in entries))


def write_mapping_file(path: str | Path, mapping: Mapping[str, str]) -> None:
    Path(path).write_text("".join(f"{k} {v}\n" for k, v in mapping.items()))


def group_patches(
    patches: Sequence[tuple[Tensor, str]],
    mapping: Mapping[str, str],
    super_classes: Sequence[str] | None = None,
) -> dict[str, list[LabeledPatch]]:
    """Partition ``(patch, fine_label)`` pairs by mapped super-class.

    The result has one (possibly empty) list per super-class, keyed in order
    of first appearance in ``mapping`` unless ``super_classes`` is given.
    Input order is preserved within each list.
    """
    order = list(super_classes) if super_classes is not None else list(dict.fromkeys(mapping.values()))
    groups: dict[str, list[LabeledPatch]] = {label: [] for label in order}
    for patch, fine in patches:
        if fine not in mapping:
            raise InvalidInputError(f"unmapped fine label: {fine!r}")
        sc = mapping[fine]
        if sc not in groups:
            raise InvalidInputError(f"super-class {sc!r} (from {fine!r}) not in configured set {order}")
        groups[sc].append(LabeledPatch(patch, sc, fine))
    return groups


# --- toy textures ----------------------------------------------------------

TEXTURE_FAMILIES = ("checker", "stripes", "gradient", "blobs", "noise")


def class_palette(seed: int, class_index: int, size: int) -> np.ndarray:
    """Fixed ``(size, 3)`` color set shared by every patch of one class."""
    return np.random.default_rng([seed, class_index, 0x9A1E77E]).uniform(0.05, 0.95, size=(size, 3))


def _texture(family: str, size: int, rng: np.random.Generator, palette: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    i, j = rng.choice(len(palette), size=2, replace=len(palette) < 2)
    c0, c1 = palette[i], palette[j]
    if family == "checker":
        period = int(rng.choice([4, 8]))
        ox, oy = rng.integers(0, period, size=2)
        t = (((xx + ox) // period + (yy + oy) // period) % 2)[..., None]
    elif family == "stripes":
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(0.25, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        t = (0.5 + 0.5 * np.sin(freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase))[..., None]
    elif family == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        u = (xx * np.cos(angle) + yy * np.sin(angle)) / size
        t = ((u - u.min()) / (u.max() - u.min() + 1e-12))[..., None]
    elif family == "blobs":
        t = np.zeros((size, size))
        for _ in range(int(rng.integers(2, 5))):
            cx, cy = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 8, size / 3)
            t = np.maximum(t, np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r**2)))
        t = t[..., None]
    elif family == "noise":
        amp = rng.uniform(0.15, 0.35)
        base = (c0 + c1) / 2
        img = base + amp * rng.standard_normal((size, size, 3))
        return np.clip(img, 0, 1)
    else:
        raise InvalidInputError(f"unknown texture family {family!r}")
    return np.clip(c0 * (1 - t) + c1 * t, 0, 1)


@dataclass(frozen=True)
class ToyDataSpec:
    num_classes: int = 5
    patches_per_class: int = 100
    patch_size: int = 64
    families: tuple[str, ...] = field(default=TEXTURE_FAMILIES)
    palette_size: int = 3

    def __post_init__(self):
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        if self.palette_size < 1:
            raise InvalidInputError("palette_size must be >= 1")
        if self.num_classes > len(self.families):
            raise InvalidInputError(f"at most {len(self.families)} texture families available")


def synthesize_toy_dataset(spec: ToyDataSpec, seed: int = 0) -> dict[str, list[LabeledPatch]]:
    """Procedural texture patches, one family per super-class.

    Each class draws its two colors per patch from a small class palette, so
    classes occupy different regions of color space. Patch ``i`` of class
    ``k`` is drawn from its own generator seeded by ``(seed, k, i)``.
    """
    out: dict[str, list[LabeledPatch]] = {}
    for k, family in enumerate(spec.families[: spec.num_classes]):
        palette = class_palette(seed, k, spec.palette_size)
        patches = []
        for i in range(spec.patches_per_class):
            rng = np.random.default_rng([seed, k, i])
            arr = _texture(family, spec.patch_size, rng, palette)
            patches.append(LabeledPatch(torch.from_numpy(arr.transpose(2, 0, 1).copy()).float(), family, family))
        out[family] = patches
    return out


# --- image IO ----------------------------------------------------------------


def to_uint8(image: Tensor) -> np.ndarray:
    arr = image.detach().cpu().double().clamp(0, 1).numpy()
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(image: Tensor, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def load_png(path: str | Path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def write_dataset(groups: Mapping[str, Sequence[LabeledPatch]], root: str | Path) -> dict[str, int]:
    """Write class subdirectories of PNGs plus ``labels.txt`` and ``mapping.txt``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries, mapping, counts = [], {}, {}
    for label, patches in groups.items():
        for i, lp in enumerate(patches):
            rel = f"{label}/{i:05d}.png"
            save_png(lp.patch, root / rel)
            fine = lp.source or label
            entries.append((rel, fine))
            mapping[fine] = label
        counts[label] = len(patches)
    write_label_file(root / "labels.txt", entries)
    write_mapping_file(root / "mapping.txt", mapping)
    return counts


def load_dataset(root: str | Path, mapping_path: str | Path | None = None) -> dict[str, list[LabeledPatch]]:
    """Read a dataset directory written by :func:`write_dataset`."""
    root = Path(root)
    mapping = read_mapping_file(mapping_path or root / "mapping.txt")
    pairs = [(load_png(root / rel), fine) for rel, fine in read_label_file(root / "labels.txt")]
    return group_patches(pairs, mapping)
