"""Three-stage training: codebook pretraining, adaptive blending, restoration."""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import torch
from torch import Tensor, nn

from .checkpoint import Checkpoint
from .codebook import VectorCodebook
from .config import RunConfig, StageConfig, from_dict
from .data import DegradationSpec, MaskSpec, apply_mask, degrade, generate_mask
from .errors import InvalidInputError, StageMismatchError, TrainingDivergedError
from .losses import (
    code_level_loss,
    discriminator_loss,
    generator_adversarial_loss,
    l1_loss,
    perceptual_loss,
    semantic_loss,
    stage1_objective,
    stage2_objective,
    stage3_objective,
    vq_loss,
)
from .models import AdaCodeModel, VQModel
from .networks import upsample_input

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingLog:
    """Line-delimited JSON records, one per optimizer step."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


@contextmanager
def _seeded(seed: int) -> Iterator[None]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _adam(params, lr: float) -> torch.optim.Adam:
    """Adam over trainable parameters; ``params`` may be a list of tensors or of param groups."""
    params = list(params)
    if params and isinstance(params[0], dict):
        groups = [{**g, "params": [p for p in g["params"] if p.requires_grad]} for g in params]
        params = [g for g in groups if g["params"]]
    else:
        params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _check_dataset(images: Tensor) -> None:
    if images.dim() != 4 or images.shape[0] == 0:
        raise InvalidInputError(f"training images must be a non-empty (N, C, H, W) tensor, got {tuple(images.shape)}")


def _record(stage: int, step: int, terms: dict, extra: dict) -> dict:
    rec = {"stage": stage, "step": step}
    for name, value in {**terms, **extra}.items():
        v = float(value.detach()) if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergedError(name, step, v)
        rec[name] = v
    return rec


def _warmup_step(sc: StageConfig) -> int:
    return int(round(sc.adv_warmup * sc.iterations))


def _state(module: nn.Module) -> dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _discriminator_step(model, opt_d: torch.optim.Optimizer, real: Tensor, fake: Tensor) -> Tensor:
    opt_d.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(model.discriminator(real), model.discriminator(fake.detach()))
    d_loss.backward()
    opt_d.step()
    return d_loss.detach()


def _adversarial(model, recon: Tensor, active: bool) -> Tensor:
    if not active:
        return recon.new_zeros(())
    return generator_adversarial_loss(model.discriminator(recon))


ProgressFn = Callable[[dict], None]


# --- stage I ------------------------------------------------------------------


def build_stage1_model(config: RunConfig, class_label: str) -> VQModel:
    sc = config.stage1
    with _seeded(sc.seed):
        model = VQModel(config.network, sc.codebook_size(class_label), class_label)
    return model.to(config.network.torch_dtype())


def stage1_checkpoint(model: VQModel, config: RunConfig, iteration: int, records=()) -> Checkpoint:
    return Checkpoint(
        stage=1,
        groups={
            "encoder": _state(model.encoder),
            "decoder": _state(model.decoder),
            "discriminator": _state(model.discriminator),
            "conv_proj": _state(model.conv_proj),
            "feature_extractor": _state(model.features),
            "codebooks": {model.codebook.class_label: model.codebook.entries.detach().clone()},
        },
        config=config.to_dict(),
        labels=[model.codebook.class_label],
        frozen={"feature_extractor": True},
        iteration=iteration,
        log=list(records),
    )


def load_stage1_model(ckpt: Checkpoint) -> VQModel:
    ckpt.require_stage(1)
    config = from_dict(ckpt.config)
    label = ckpt.labels[0]
    entries = ckpt.groups["codebooks"][label]
    model = VQModel(config.network, entries.shape[0], label).to(entries.dtype)
    model.encoder.load_state_dict(ckpt.groups["encoder"])
    model.decoder.load_state_dict(ckpt.groups["decoder"])
    model.discriminator.load_state_dict(ckpt.groups["discriminator"])
    model.conv_proj.load_state_dict(ckpt.groups["conv_proj"])
    model.features.load_state_dict(ckpt.groups["feature_extractor"])
    with torch.no_grad():
        model.codebook.entries.copy_(entries)
    return model


def stage1_losses(model: VQModel, batch: Tensor, sc: StageConfig, adv_active: bool):
    """Forward pass and Stage I loss terms on one batch."""
    out = model(batch)
    recon = out["recon"]
    l1 = l1_loss(recon, batch)
    per = perceptual_loss(recon, batch, model.features)
    adv = _adversarial(model, recon, adv_active)
    vq = vq_loss(out["continuous"], out["quantized"], sc.beta)
    sem = semantic_loss(out["continuous"], batch, model.conv_proj, model.features)
    total, terms = stage1_objective(l1, per, adv, vq, sem, lam=sc.lam)
    return total, terms, out


def train_stage1(
    config: RunConfig,
    images: Tensor,
    class_label: str,
    log_path: str | Path | None = None,
    progress: ProgressFn | None = None,
) -> Checkpoint:
    """Train encoder, decoder, codebook, projection and discriminator on one super-class."""
    _check_dataset(images)
    sc = config.stage1
    dtype = config.network.torch_dtype()
    images = images.to(dtype)
    model = build_stage1_model(config, class_label)
    opt_g = _adam(
        [
            {"params": [*model.encoder.parameters(), *model.decoder.parameters(), *model.conv_proj.parameters()]},
            {"params": list(model.codebook.parameters()), "lr": sc.lr_codebook or sc.lr_generator},
        ],
        sc.lr_generator,
    )
    opt_d = _adam(model.discriminator.parameters(), sc.lr_discriminator)
    gen = torch.Generator().manual_seed(sc.seed + 1)
    warmup = _warmup_step(sc)
    logbook = TrainingLog(log_path)
    for step in range(sc.iterations):
        batch = images[torch.randint(images.shape[0], (sc.batch_size,), generator=gen)]
        total, terms, out = stage1_losses(model, batch, sc, step >= warmup)
        record = _record(1, step, terms, {"total": total})
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        record["disc"] = float(_discriminator_step(model, opt_d, batch, out["recon"]))
        logbook.append(record)
        if progress:
            progress(record)
    return stage1_checkpoint(model, config, sc.iterations, logbook.records)


# --- stage II -----------------------------------------------------------------


def _basis_from_stage1(ckpts: Sequence[Checkpoint], subset: Sequence[str] | None) -> list[VectorCodebook]:
    if not ckpts:
        raise InvalidInputError("need at least one stage 1 checkpoint")
    by_label: dict[str, Tensor] = {}
    for ck in ckpts:
        ck.require_stage(1)
        for label in ck.labels:
            by_label[label] = ck.groups["codebooks"][label]
    labels = list(subset) if subset else list(by_label)
    unknown = [label for label in labels if label not in by_label]
    if unknown:
        raise InvalidInputError(f"basis_subset names unknown labels {unknown}; available {sorted(by_label)}")
    dims = {label: by_label[label].shape[1] for label in labels}
    if len(set(dims.values())) != 1:
        raise InvalidInputError(f"stage 1 codebooks disagree on latent dimension: {dims}")
    return _codebooks(labels, [by_label[label] for label in labels])


def _codebooks(labels: Sequence[str], tables: Sequence[Tensor]) -> list[VectorCodebook]:
    books = []
    for label, table in zip(labels, tables):
        cb = VectorCodebook(table.shape[0], table.shape[1], label).to(table.dtype)
        with torch.no_grad():
            cb.entries.copy_(table)
        cb.requires_grad_(False)
        books.append(cb)
    return books


def merged_codebook(ckpts: Sequence[Checkpoint], label: str = "merged") -> Checkpoint:
    """Concatenate stage 1 codebooks into a single-codebook stage 1 checkpoint.

    Only the codebook is meaningful; network groups are copied from the first
    checkpoint so the result is a well-formed stage 1 artifact.
    """
    books = _basis_from_stage1(ckpts, None)
    table = torch.cat([cb.entries.detach() for cb in books], dim=0)
    first = ckpts[0]
    groups = {k: dict(v) for k, v in first.groups.items()}
    groups["codebooks"] = {label: table}
    return Checkpoint(stage=1, groups=groups, config=first.config, labels=[label], frozen=dict(first.frozen))


def build_stage2_model(config: RunConfig, stage1_ckpts: Sequence[Checkpoint]) -> AdaCodeModel:
    sc = config.stage2
    books = _basis_from_stage1(stage1_ckpts, sc.basis_subset)
    with _seeded(sc.seed):
        model = AdaCodeModel(config.network, books)
    model = model.to(config.network.torch_dtype())
    if sc.init_from:
        source = {ck.labels[0]: ck for ck in stage1_ckpts}.get(sc.init_from)
        if source is None:
            raise InvalidInputError(f"init_from label {sc.init_from!r} not among stage 1 checkpoints")
        model.encoder.load_state_dict(source.groups["encoder"])
        model.decoder.load_state_dict(source.groups["decoder"])
        model.discriminator.load_state_dict(source.groups["discriminator"])
    return model


def adacode_checkpoint(
    model: AdaCodeModel, config: RunConfig, stage: int, iteration: int, task: str, records=()
) -> Checkpoint:
    frozen = {"codebooks": True, "feature_extractor": True, "decoder": stage == 3}
    return Checkpoint(
        stage=stage,
        groups={
            "encoder": _state(model.encoder),
            "decoder": _state(model.decoder),
            "discriminator": _state(model.discriminator),
            "weight_predictor": _state(model.weight_predictor),
            "feature_extractor": _state(model.features),
            "codebooks": {cb.class_label: cb.entries.detach().clone() for cb in model.basis.codebooks},
        },
        config=config.to_dict(),
        labels=list(model.basis.labels),
        frozen=frozen,
        iteration=iteration,
        task=task,
        log=list(records),
    )


def load_adacode_model(ckpt: Checkpoint) -> AdaCodeModel:
    """Rebuild a stage 2 or stage 3 model with its frozen groups frozen."""
    ckpt.require_stage(2, 3)
    config = from_dict(ckpt.config)
    tables = [ckpt.groups["codebooks"][label] for label in ckpt.labels]
    in_channels = ckpt.groups["encoder"]["stem.weight"].shape[1]
    model = AdaCodeModel(
        config.network, _codebooks(ckpt.labels, tables), in_channels=in_channels, restoration=ckpt.stage == 3
    ).to(tables[0].dtype)
    model.encoder.load_state_dict(ckpt.groups["encoder"])
    model.decoder.load_state_dict(ckpt.groups["decoder"])
    model.discriminator.load_state_dict(ckpt.groups["discriminator"])
    model.weight_predictor.load_state_dict(ckpt.groups["weight_predictor"])
    model.features.load_state_dict(ckpt.groups["feature_extractor"])
    if ckpt.stage == 3:
        model.decoder.requires_grad_(False)
    return model


def stage2_losses(model: AdaCodeModel, batch: Tensor, sc: StageConfig, adv_active: bool):
    out = model(batch)
    recon = out["recon"]
    l1 = l1_loss(recon, batch)
    per = perceptual_loss(recon, batch, model.features)
    adv = _adversarial(model, recon, adv_active)
    # Codebooks are frozen: only the commitment side carries gradient.
    vq = vq_loss(out["continuous"], out["blended"].detach(), sc.beta)
    total, terms = stage2_objective(l1, per, adv, vq, lam=sc.lam)
    return total, terms, out


def train_stage2(
    config: RunConfig,
    stage1_ckpts: Sequence[Checkpoint],
    images: Tensor,
    log_path: str | Path | None = None,
    progress: ProgressFn | None = None,
) -> Checkpoint:
    """Learn encoder, weight predictor, decoder and discriminator over frozen bases."""
    _check_dataset(images)
    sc = config.stage2
    dtype = config.network.torch_dtype()
    images = images.to(dtype)
    model = build_stage2_model(config, stage1_ckpts)
    opt_g = _adam(
        [*model.encoder.parameters(), *model.weight_predictor.parameters(), *model.decoder.parameters()],
        sc.lr_generator,
    )
    opt_d = _adam(model.discriminator.parameters(), sc.lr_discriminator)
    gen = torch.Generator().manual_seed(sc.seed + 1)
    warmup = _warmup_step(sc)
    logbook = TrainingLog(log_path)
    for step in range(sc.iterations):
        batch = images[torch.randint(images.shape[0], (sc.batch_size,), generator=gen)]
        total, terms, out = stage2_losses(model, batch, sc, step >= warmup)
        record = _record(2, step, terms, {"total": total})
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        record["disc"] = float(_discriminator_step(model, opt_d, batch, out["recon"]))
        logbook.append(record)
        if progress:
            progress(record)
    return adacode_checkpoint(model, config, 2, sc.iterations, "reconstruction", logbook.records)


def compute_z_gt(hr: Tensor, stage2: Checkpoint | AdaCodeModel) -> Tensor:
    """Blended representation of ``hr`` under the frozen stage 2 pipeline."""
    if isinstance(stage2, Checkpoint):
        if stage2.stage != 2:
            raise StageMismatchError(f"z_gt needs a stage 2 checkpoint, got stage {stage2.stage}")
        stage2 = load_adacode_model(stage2)
    dtype = next(stage2.decoder.parameters()).dtype
    with torch.no_grad():
        return stage2.represent(hr.to(dtype))["blended"]


# --- stage III ------------------------------------------------------------------


@dataclass
class PairedData:
    """Degraded inputs aligned with HR targets.

    For super-resolution ``degraded`` holds the LR images; for inpainting it
    holds the gray-filled images and ``masks`` the hole masks.
    """

    task: str
    degraded: Tensor
    hr: Tensor
    masks: Tensor | None = None

    def __len__(self) -> int:
        return self.hr.shape[0]


def make_pairs(hr: Tensor, task: str, degradation=None, mask=None) -> PairedData:
    """Derive degraded inputs, seeding image ``i`` with ``base_seed + i``."""
    if task == "super_resolution":
        d = degradation
        lows = [
            degrade(img, DegradationSpec(d.blur_sigma, d.scale, d.noise_std, d.resample, d.seed + i))
            for i, img in enumerate(hr)
        ]
        return PairedData(task, torch.stack(lows), hr)
    if task == "inpainting":
        m = mask
        h, w = hr.shape[-2:]
        masks = [
            torch.from_numpy(
                generate_mask(MaskSpec(m.num_strokes, m.max_vertices, m.min_width, m.max_width, m.max_length, m.seed + i), (h, w))
            ).to(hr.dtype)
            for i in range(hr.shape[0])
        ]
        holes = torch.stack(masks)
        degraded = torch.stack([apply_mask(img, mk) for img, mk in zip(hr, holes)])
        return PairedData(task, degraded, hr, holes)
    raise InvalidInputError(f"unknown restoration task {task!r}")


def model_input(task: str, degraded: Tensor, masks: Tensor | None, hr_size: tuple[int, int]) -> Tensor:
    """Encoder input: bicubic-lifted LR for SR, masked image plus mask channel for inpainting."""
    if task == "super_resolution":
        return upsample_input(degraded, hr_size)
    if task == "inpainting":
        if masks is None:
            raise InvalidInputError("inpainting needs masks")
        return torch.cat([degraded, masks.unsqueeze(1).to(degraded.dtype)], dim=1)
    raise InvalidInputError(f"unknown restoration task {task!r}")


def build_stage3_model(config: RunConfig, stage2_ckpt: Checkpoint, task: str) -> AdaCodeModel:
    if stage2_ckpt.stage != 2:
        raise StageMismatchError(f"stage 3 needs a stage 2 checkpoint, got stage {stage2_ckpt.stage}")
    tables = [stage2_ckpt.groups["codebooks"][label] for label in stage2_ckpt.labels]
    in_channels = 4 if task == "inpainting" else 3
    with _seeded(config.stage3.seed):
        model = AdaCodeModel(
            config.network, _codebooks(stage2_ckpt.labels, tables), in_channels=in_channels, restoration=True
        )
    model = model.to(config.network.torch_dtype())
    enc_state = dict(stage2_ckpt.groups["encoder"])
    stem = enc_state["stem.weight"]
    if stem.shape[1] != in_channels:
        # extra mask channel starts with zero weight
        pad = stem.new_zeros(stem.shape[0], in_channels - stem.shape[1], *stem.shape[2:])
        enc_state["stem.weight"] = torch.cat([stem, pad], dim=1)
    model.encoder.load_state_dict(enc_state, strict=False)
    model.weight_predictor.load_state_dict(stage2_ckpt.groups["weight_predictor"])
    model.decoder.load_state_dict(stage2_ckpt.groups["decoder"])
    model.discriminator.load_state_dict(stage2_ckpt.groups["discriminator"])
    model.features.load_state_dict(stage2_ckpt.groups["feature_extractor"])
    model.decoder.requires_grad_(False)
    return model


def stage3_losses(
    model: AdaCodeModel,
    x: Tensor,
    hr: Tensor,
    z_gt: Tensor,
    source_ids: Sequence[int],
    sc: StageConfig,
    adv_active: bool,
):
    out = model(x)
    recon = out["recon"]
    l1 = l1_loss(recon, hr)
    per = perceptual_loss(recon, hr, model.features)
    adv = _adversarial(model, recon, adv_active)
    code, code_terms = code_level_loss(out["blended"], z_gt, out["continuous"], source_ids, sc.tau, sc.beta)
    total, terms = stage3_objective(l1, per, adv, code, lam=sc.lam)
    return total, {**terms, **code_terms}, out


def train_stage3(
    config: RunConfig,
    stage2_ckpt: Checkpoint,
    pairs: PairedData,
    log_path: str | Path | None = None,
    progress: ProgressFn | None = None,
) -> Checkpoint:
    """Train the restoration encoder and weight predictor; decoder and codebooks stay fixed."""
    sc = config.stage3
    if stage2_ckpt.stage != 2:
        raise StageMismatchError(f"stage 3 needs a stage 2 checkpoint, got stage {stage2_ckpt.stage}")
    if len(pairs) == 0:
        raise InvalidInputError("stage 3 needs at least one training pair")
    if pairs.task != sc.task:
        raise InvalidInputError(f"paired data is for {pairs.task!r} but stage3.task is {sc.task!r}")
    dtype = config.network.torch_dtype()
    hr = pairs.hr.to(dtype)
    inputs = model_input(sc.task, pairs.degraded.to(dtype), pairs.masks, tuple(hr.shape[-2:]))
    reference = load_adacode_model(stage2_ckpt).to(dtype).eval().requires_grad_(False)
    model = build_stage3_model(config, stage2_ckpt, sc.task)
    opt_g = _adam([*model.encoder.parameters(), *model.weight_predictor.parameters()], sc.lr_generator)
    opt_d = _adam(model.discriminator.parameters(), sc.lr_discriminator)
    gen = torch.Generator().manual_seed(sc.seed + 1)
    warmup = _warmup_step(sc)
    logbook = TrainingLog(log_path)
    for step in range(sc.iterations):
        idx = torch.randint(len(pairs), (sc.batch_size,), generator=gen)
        x, y = inputs[idx], hr[idx]
        z_gt = compute_z_gt(y, reference)
        total, terms, out = stage3_losses(model, x, y, z_gt, idx.tolist(), sc, step >= warmup)
        record = _record(3, step, terms, {"total": total})
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        record["disc"] = float(_discriminator_step(model, opt_d, y, out["recon"]))
        logbook.append(record)
        if progress:
            progress(record)
    return adacode_checkpoint(model, config, 3, sc.iterations, sc.task, logbook.records)


def restore(model: AdaCodeModel, degraded: Tensor, task: str, masks: Tensor | None = None, scale: int = 1) -> Tensor:
    """Run a stage 3 model on degraded inputs, returning clipped HR images."""
    h, w = degraded.shape[-2:]
    size = (h * scale, w * scale) if task == "super_resolution" else (h, w)
    dtype = next(model.decoder.parameters()).dtype
    x = model_input(task, degraded.to(dtype), masks, size)
    with torch.no_grad():
        return model(x)["recon"].clamp(0.0, 1.0)


def reconstruct(model: nn.Module, images: Tensor) -> Tensor:
    dtype = next(model.decoder.parameters()).dtype
    with torch.no_grad():
        return model(images.to(dtype))["recon"].clamp(0.0, 1.0)
