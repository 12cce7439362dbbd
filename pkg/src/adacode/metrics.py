"""PSNR/SSIM and task-level evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import Checkpoint
from .data import save_png
from .errors import InvalidInputError, StageMismatchError
from .training import load_adacode_model, load_stage1_model, make_pairs, reconstruct, restore

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = (0.299, 0.587, 0.114)


def _pair(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a.double(), b.double()


def psnr(a: Tensor, b: Tensor) -> float:
    """RGB PSNR for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def luma(image: Tensor) -> Tensor:
    """ITU-R BT.601 luma of a ``(3, H, W)`` image."""
    r, g, b = image[-3], image[-2], image[-1]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows on the luma channel."""
    a, b = _pair(a, b)
    if a.dim() != 3 or a.shape[0] != 3:
        raise InvalidInputError(f"ssim expects (3, H, W) images, got {tuple(a.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InvalidInputError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = luma(a)[None, None]
    y = luma(b)[None, None]
    win = _gaussian_window()[None, None]
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    var_x = F.conv2d(x * x, win) - mu_x**2
    var_y = F.conv2d(y * y, win) - mu_y**2
    cov = F.conv2d(x * y, win) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


@dataclass
class EvalReport:
    task: str
    rows: list[dict[str, Any]] = field(default_factory=list)
    config_ref: str = ""

    @property
    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {"count": len(self.rows)}
        if self.rows:
            for key in ("psnr", "ssim"):
                out[f"mean_{key}"] = float(np.mean([row[key] for row in self.rows]))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"task": self.task, "config_ref": self.config_ref, "rows": self.rows, "summary": self.summary}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path


def _model_for_task(task: str, ckpt: Checkpoint):
    if task == "reconstruction":
        if ckpt.stage == 1:
            return load_stage1_model(ckpt)
        if ckpt.stage == 2:
            return load_adacode_model(ckpt)
        raise StageMismatchError(f"reconstruction needs a stage 1 or 2 checkpoint, got stage {ckpt.stage}")
    if ckpt.stage != 3:
        raise StageMismatchError(f"{task} needs a stage 3 checkpoint, got stage {ckpt.stage}")
    if ckpt.task != task:
        raise StageMismatchError(f"checkpoint was trained for {ckpt.task}, not {task}")
    return load_adacode_model(ckpt)


def run_model(task: str, model, hr: Tensor, degradation=None, mask=None, batch_size: int = 16) -> tuple[Tensor, Tensor | None]:
    """Produce outputs for ``hr`` under ``task``; also returns the degraded inputs."""
    outputs = []
    if task == "reconstruction":
        for start in range(0, hr.shape[0], batch_size):
            outputs.append(reconstruct(model, hr[start : start + batch_size]))
        return torch.cat(outputs).to(hr.dtype), None
    pairs = make_pairs(hr, task, degradation, mask)
    scale = degradation.scale if task == "super_resolution" else 1
    for start in range(0, hr.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        masks = pairs.masks[sl] if pairs.masks is not None else None
        outputs.append(restore(model, pairs.degraded[sl], task, masks, scale))
    return torch.cat(outputs).to(hr.dtype), pairs.degraded


def evaluate(
    task: str,
    ckpt: Checkpoint,
    hr: Tensor | Sequence[Tensor],
    names: Sequence[str] | None = None,
    degradation=None,
    mask=None,
    grid_dir: str | Path | None = None,
) -> EvalReport:
    """Run the frozen pipeline on every HR image and score it against the original."""
    model = _model_for_task(task, ckpt)
    model.eval()
    images = hr if isinstance(hr, Tensor) else (torch.stack(list(hr)) if len(hr) else torch.empty(0, 3, 1, 1))
    report = EvalReport(task, config_ref=ckpt.manifest()["config_hash"])
    if images.shape[0] == 0:
        return report
    names = list(names) if names is not None else [f"{i:05d}" for i in range(images.shape[0])]
    outputs, degraded = run_model(task, model, images, degradation, mask)
    for i, name in enumerate(names):
        report.rows.append({"path": name, "psnr": psnr(outputs[i], images[i]), "ssim": ssim(outputs[i], images[i])})
        if grid_dir is not None:
            tiles = [images[i], outputs[i]]
            if degraded is not None:
                lifted = F.interpolate(degraded[i : i + 1].double(), size=images.shape[-2:], mode="nearest")[0]
                tiles.insert(0, lifted.to(images.dtype))
            save_png(torch.cat(tiles, dim=-1), Path(grid_dir) / f"{name.replace('/', '_')}.png")
    return report
