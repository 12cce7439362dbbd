"""Checkpoint container: named parameter groups, stage metadata and freeze flags.

On disk a checkpoint is an uncompressed zip archive holding ``manifest.json``
and one ``.npy`` file per tensor. The manifest records group names, tensor
shapes and dtypes, a SHA-256 per group, the config snapshot and its hash.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import Tensor

from .errors import CheckpointCorruptError, CheckpointFormatError, StageMismatchError

FORMAT = "adacode-checkpoint"
VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

REQUIRED_GROUPS = {
    1: ("encoder", "decoder", "discriminator", "conv_proj", "codebooks", "feature_extractor"),
    2: ("encoder", "decoder", "discriminator", "weight_predictor", "codebooks", "feature_extractor"),
    3: ("encoder", "decoder", "discriminator", "weight_predictor", "codebooks", "feature_extractor"),
}


def tensor_group_hash(group: Mapping[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(group):
        arr = group[name].detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return tensor_group_hash(dict(module.state_dict()))


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    stage: int
    groups: dict[str, dict[str, Tensor]]
    config: dict[str, Any]
    labels: list[str]
    frozen: dict[str, bool] = field(default_factory=dict)
    iteration: int = 0
    task: str = "reconstruction"
    # per-step training records; not persisted in the container
    log: list[dict] = field(default_factory=list, repr=False)

    def hashes(self) -> dict[str, str]:
        return {name: tensor_group_hash(group) for name, group in self.groups.items()}

    def require_stage(self, *stages: int) -> "Checkpoint":
        if self.stage not in stages:
            raise StageMismatchError(f"expected a stage {'/'.join(map(str, stages))} checkpoint, got stage {self.stage}")
        return self

    def manifest(self) -> dict[str, Any]:
        return {
            "format": FORMAT,
            "version": VERSION,
            "stage": self.stage,
            "iteration": self.iteration,
            "task": self.task,
            "labels": list(self.labels),
            "frozen": dict(self.frozen),
            "config": self.config,
            "config_hash": config_hash(self.config),
            "groups": {
                gname: {
                    "hash": tensor_group_hash(group),
                    "tensors": {
                        tname: {
                            "file": f"{gname}/{i:04d}.npy",
                            "shape": list(t.shape),
                            "dtype": str(t.dtype).replace("torch.", ""),
                        }
                        for i, (tname, t) in enumerate(sorted(group.items()))
                    },
                }
                for gname, group in self.groups.items()
            },
        }


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = ckpt.manifest()
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for gname, group in ckpt.groups.items():
            for tname, meta in manifest["groups"][gname]["tensors"].items():
                buf = io.BytesIO()
                np.save(buf, group[tname].detach().cpu().contiguous().numpy(), allow_pickle=False)
                _write_entry(zf, meta["file"], buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint; nothing is returned unless every check passes."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError, zipfile.BadZipFile, OSError) as exc:
            raise CheckpointFormatError(f"{path}: missing or unreadable manifest") from exc
        if manifest.get("format") != FORMAT:
            raise CheckpointFormatError(f"{path}: unknown format {manifest.get('format')!r}")
        stage = manifest.get("stage")
        missing = [g for g in REQUIRED_GROUPS.get(stage, ()) if g not in manifest.get("groups", {})]
        if stage not in REQUIRED_GROUPS or missing:
            raise CheckpointFormatError(f"{path}: stage {stage} checkpoint missing groups {missing}")
        if config_hash(manifest["config"]) != manifest.get("config_hash"):
            raise CheckpointCorruptError(f"{path}: config snapshot hash mismatch")
        groups: dict[str, dict[str, Tensor]] = {}
        for gname, gmeta in manifest["groups"].items():
            group = {}
            for tname, meta in gmeta["tensors"].items():
                try:
                    arr = np.load(io.BytesIO(zf.read(meta["file"])), allow_pickle=False)
                except (KeyError, ValueError, zipfile.BadZipFile, OSError, EOFError) as exc:
                    raise CheckpointFormatError(f"{path}: cannot read tensor {gname}/{tname}") from exc
                if list(arr.shape) != meta["shape"]:
                    raise CheckpointFormatError(f"{path}: tensor {gname}/{tname} has wrong shape")
                group[tname] = torch.from_numpy(arr.copy())
            if tensor_group_hash(group) != gmeta["hash"]:
                raise CheckpointCorruptError(f"{path}: content hash mismatch in group {gname!r}")
            groups[gname] = group
    return Checkpoint(
        stage=stage,
        groups=groups,
        config=manifest["config"],
        labels=list(manifest["labels"]),
        frozen=dict(manifest["frozen"]),
        iteration=int(manifest["iteration"]),
        task=manifest.get("task", "reconstruction"),
    )
