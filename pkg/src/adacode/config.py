"""Run configuration: dataclass hierarchy, presets, YAML IO and overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import torch
import yaml

from .errors import ConfigError

OUTPUT_ROOT_ENV = "ADACODE_OUTPUT_ROOT"

TASKS = ("reconstruction", "super_resolution", "inpainting")

# Super-class grouping used for the full-scale preset.
PAPER_CODEBOOK_SIZES = {
    "architectures": 512,
    "indoor_objects": 256,
    "natural_scenes": 512,
    "street_views": 256,
    "portraits": 256,
}


@dataclass
class NetworkConfig:
    factor: int = 8
    latent_dim: int = 32
    channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    disc_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    disc_stride: int = 8
    feature_dim: int = 64
    feature_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    feature_seed: int = 0
    predictor_dim: int = 32
    predictor_depth: int = 4
    predictor_heads: int = 2
    predictor_window: int = 4
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class StageConfig:
    stage: int = 1
    iterations: int = 2000
    batch_size: int = 8
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    lr_codebook: float | None = None
    lam: float = 0.1
    beta: float = 0.25
    tau: float = 0.1
    adv_warmup: float = 0.25
    codebook_sizes: dict[str, int] = field(default_factory=dict)
    default_codebook_size: int = 64
    basis_subset: list[str] | None = None
    init_from: str | None = None
    task: str = "reconstruction"
    seed: int = 0

    def codebook_size(self, label: str) -> int:
        return int(self.codebook_sizes.get(label, self.default_codebook_size))


@dataclass
class DegradationConfig:
    blur_sigma: float = 1.0
    scale: int = 4
    noise_std: float = 0.02
    resample: str = "bicubic"
    seed: int = 0


@dataclass
class MaskConfig:
    num_strokes: int = 4
    max_vertices: int = 6
    min_width: int = 3
    max_width: int = 7
    max_length: float = 0.3
    seed: int = 0


@dataclass
class DataConfig:
    num_classes: int = 5
    patches_per_class: int = 100
    patch_size: int = 64
    palette_size: int = 3
    dataset_dir: str = "data"
    label_file: str | None = None
    mapping_file: str | None = None


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(stage=3, task="super_resolution"))
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"
    seed: int = 0

    def stage(self, n: int) -> StageConfig:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3}[n]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def validate(self) -> "RunConfig":
        net = self.network
        if net.factor not in (4, 8, 16):
            raise ConfigError(f"network.factor must be 4, 8 or 16, got {net.factor}")
        if net.disc_stride not in (4, 8, 16):
            raise ConfigError(f"network.disc_stride must be 4, 8 or 16, got {net.disc_stride}")
        if net.latent_dim < 1 or net.feature_dim < 1:
            raise ConfigError("network dims must be positive")
        if net.dtype not in ("float32", "float64"):
            raise ConfigError(f"network.dtype must be float32 or float64, got {net.dtype}")
        if net.predictor_dim % net.predictor_heads:
            raise ConfigError("predictor_dim must be divisible by predictor_heads")
        for n in (1, 2, 3):
            sc = self.stage(n)
            if sc.stage != n:
                raise ConfigError(f"stage{n}.stage must be {n}")
            if sc.iterations < 0 or sc.batch_size < 1:
                raise ConfigError(f"stage{n}: iterations must be >= 0 and batch_size >= 1")
            if sc.lr_generator <= 0 or sc.lr_discriminator <= 0 or (sc.lr_codebook is not None and sc.lr_codebook <= 0):
                raise ConfigError(f"stage{n}: learning rates must be positive")
            if sc.lam < 0 or sc.beta < 0 or sc.tau <= 0:
                raise ConfigError(f"stage{n}: need lam >= 0, beta >= 0, tau > 0")
            if not 0 <= sc.adv_warmup <= 1:
                raise ConfigError(f"stage{n}: adv_warmup must be in [0, 1]")
            if sc.task not in TASKS:
                raise ConfigError(f"stage{n}.task must be one of {TASKS}")
            if any(int(v) < 1 for v in sc.codebook_sizes.values()) or sc.default_codebook_size < 1:
                raise ConfigError(f"stage{n}: codebook sizes must be >= 1")
        if self.stage3.task == "reconstruction":
            raise ConfigError("stage3.task must be super_resolution or inpainting")
        if self.data.num_classes < 1:
            raise ConfigError("data.num_classes must be >= 1")
        if self.data.patches_per_class < 1 or self.data.palette_size < 1:
            raise ConfigError("data.patches_per_class and data.palette_size must be >= 1")
        if self.data.patch_size % net.factor or self.data.patch_size % net.disc_stride:
            raise ConfigError("data.patch_size must be divisible by the network factor and disc stride")
        if self.degradation.scale not in (1, 2, 4):
            raise ConfigError("degradation.scale must be 1, 2 or 4")
        if self.data.patch_size % self.degradation.scale:
            raise ConfigError("data.patch_size must be divisible by degradation.scale")
        return self

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return Path(root) / out if root and not out.is_absolute() else out


def _build(cls, data: Mapping[str, Any], path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}".lstrip(".")) if sub else _coerce(known[name].type, value, name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(annotation: str, value: Any, name: str) -> Any:
    # YAML 1.1 reads "1e-4" as a string
    try:
        if annotation in ("float", "float | None") and isinstance(value, (int, str)) and not isinstance(value, bool):
            return float(value)
        if annotation == "int" and isinstance(value, str):
            return int(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r} as {annotation}") from exc
    return value


_NESTED = {
    (RunConfig, "network"): NetworkConfig,
    (RunConfig, "stage1"): StageConfig,
    (RunConfig, "stage2"): StageConfig,
    (RunConfig, "stage3"): StageConfig,
    (RunConfig, "degradation"): DegradationConfig,
    (RunConfig, "mask"): MaskConfig,
    (RunConfig, "data"): DataConfig,
}


def merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Build a config from a (partial) mapping layered over the defaults."""
    return _build(RunConfig, merge(RunConfig().to_dict(), data), "").validate()


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_dict(PRESETS[name])


def load_config(path: str | Path | None = None, preset_name: str = "desk") -> RunConfig:
    base = PRESETS.get(preset_name)
    if base is None:
        raise ConfigError(f"unknown preset {preset_name!r}")
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    return from_dict(merge(base, data))


def dump_config(config: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def apply_overrides(config: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``dotted.key=value`` overrides; values parse as YAML scalars."""
    data = config.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node and parts[-2:-1] != ["codebook_sizes"]:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def replace_stage(config: RunConfig, n: int, **changes) -> RunConfig:
    new = dataclasses.replace(config.stage(n), **changes)
    return dataclasses.replace(config, **{f"stage{n}": new}).validate()


PRESETS: dict[str, dict[str, Any]] = {
    # minutes-scale defaults; codebook entries start near zero and need a faster rate to reach the encoder
    "desk": {"stage1": {"lr_codebook": 1e-2}},
    # seconds-scale, used by the test-suite
    "tiny": {
        "network": {
            "factor": 4,
            "latent_dim": 8,
            "channels": [16, 32],
            "disc_channels": [16, 32],
            "disc_stride": 4,
            "feature_dim": 16,
            "feature_channels": [8, 16],
            "predictor_dim": 16,
            "predictor_depth": 4,
            "predictor_heads": 2,
            "predictor_window": 4,
        },
        "stage1": {
            "iterations": 300,
            "batch_size": 8,
            "default_codebook_size": 16,
            "lr_generator": 1e-3,
            "lr_codebook": 1e-2,
        },
        "stage2": {"iterations": 400, "batch_size": 8, "lr_generator": 1e-3},
        "stage3": {"iterations": 200, "batch_size": 4, "task": "super_resolution", "lr_generator": 1e-3},
        "data": {"num_classes": 3, "patches_per_class": 32, "patch_size": 32},
        "degradation": {"scale": 4, "blur_sigma": 1.0, "noise_std": 0.0},
    },
    # full-scale settings; never run by the tests
    "paper": {
        "network": {"factor": 16, "latent_dim": 256, "channels": [128, 128, 256, 256], "disc_stride": 16,
                    "disc_channels": [64, 128, 256, 512], "feature_dim": 256,
                    "feature_channels": [64, 128, 256, 512], "predictor_dim": 180, "predictor_heads": 6,
                    "predictor_window": 8},
        "stage1": {"iterations": 350_000, "batch_size": 32, "codebook_sizes": dict(PAPER_CODEBOOK_SIZES)},
        "stage2": {"iterations": 350_000, "batch_size": 32},
        "stage3": {"iterations": 350_000, "batch_size": 32, "task": "super_resolution"},
        "data": {"patch_size": 512},
    },
}
