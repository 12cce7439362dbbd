"""Command-line entry points: ``adacode <subcommand> [options]``.

Every subcommand accepts ``--config`` (YAML), ``--preset`` and repeated
``--set key=value`` overrides; dedicated flags such as ``--iterations`` win
over both. The config is resolved and validated before anything touches the
filesystem. Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .adaptive import save_weight_maps
from .checkpoint import load_checkpoint, save_checkpoint
from .codebook import visualize_code
from .config import RunConfig, apply_overrides, dump_config, load_config, replace_stage
from .data import (
    MaskSpec,
    ToyDataSpec,
    apply_mask,
    generate_mask,
    load_dataset,
    load_png,
    save_png,
    synthesize_toy_dataset,
    write_dataset,
)
from .errors import ConfigError, InvalidInputError
from .metrics import evaluate
from .training import (
    load_adacode_model,
    load_stage1_model,
    make_pairs,
    model_input,
    restore,
    train_stage1,
    train_stage2,
    train_stage3,
)

TASK_ALIASES = {"sr": "super_resolution", "inpaint": "inpainting", "reconstruction": "reconstruction"}
CONFIG_SNAPSHOT = "config.yaml"


class CommandError(RuntimeError):
    """Runtime failure reported with exit code 2."""


# --- paths ---------------------------------------------------------------------


def stage1_path(out: Path, label: str) -> Path:
    return out / "stage1" / f"{label}.ckpt"


def stage2_path(out: Path) -> Path:
    return out / "stage2" / "adacode.ckpt"


def stage3_path(out: Path, task: str) -> Path:
    return out / "stage3" / f"{task}.ckpt"


def _snapshot(config: RunConfig, out: Path) -> Path:
    path = out / CONFIG_SNAPSHOT
    dump_config(config, path)
    return path


def _require(paths: Sequence[Path], what: str) -> None:
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise CommandError(f"missing {what}: {', '.join(missing)}")


def _images(groups) -> torch.Tensor:
    patches = [lp.patch for items in groups.values() for lp in items]
    if not patches:
        raise CommandError("dataset is empty")
    return torch.stack(patches)


def _load_groups(config: RunConfig):
    root = Path(config.data.dataset_dir)
    if not (root / "labels.txt").is_file():
        raise CommandError(f"no dataset at {root} (expected {root / 'labels.txt'}); run synth-data first")
    return load_dataset(root, config.data.mapping_file)


def _input_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    elif path.is_file():
        files = [path]
    else:
        raise CommandError(f"input not found: {path}")
    if not files:
        raise CommandError(f"no PNG images in {path}")
    return files


def _progress(every: int):
    if every <= 0:
        return None

    def report(record: dict) -> None:
        if record["step"] % every == 0:
            terms = " ".join(f"{k}={v:.4f}" for k, v in record.items() if k not in ("stage", "step"))
            print(f"stage {record['stage']} step {record['step']}: {terms}", flush=True)

    return report


# --- commands ------------------------------------------------------------------


def cmd_synth_data(config: RunConfig, args) -> int:
    d = config.data
    spec = ToyDataSpec(d.num_classes, d.patches_per_class, d.patch_size, palette_size=d.palette_size)
    groups = synthesize_toy_dataset(spec, seed=config.seed)
    counts = write_dataset(groups, d.dataset_dir)
    for label, n in counts.items():
        print(f"{label}: {n}")
    return 0


def cmd_train(config: RunConfig, args) -> int:
    out = config.resolved_output_dir()
    stage = args.stage
    sc = config.stage(stage)
    progress = _progress(args.log_every)
    if stage == 1:
        groups = _load_groups(config)
        _snapshot(config, out / "stage1")
        for label, items in groups.items():
            if not items:
                raise CommandError(f"class {label!r} has no patches")
            ckpt = train_stage1(
                config,
                torch.stack([lp.patch for lp in items]),
                label,
                log_path=out / "stage1" / f"{label}.jsonl",
                progress=progress,
            )
            print(f"wrote {save_checkpoint(ckpt, stage1_path(out, label))}")
        return 0
    if stage == 2:
        groups = _load_groups(config)
        labels = list(sc.basis_subset) if sc.basis_subset else list(groups)
        paths = [stage1_path(out, label) for label in labels]
        _require(paths, "stage 1 checkpoints")
        ckpts = [load_checkpoint(p) for p in paths]
        _snapshot(config, out / "stage2")
        ckpt = train_stage2(config, ckpts, _images(groups), log_path=out / "stage2" / "adacode.jsonl", progress=progress)
        print(f"wrote {save_checkpoint(ckpt, stage2_path(out))}")
        return 0
    groups = _load_groups(config)
    _require([stage2_path(out)], "stage 2 checkpoint")
    stage2 = load_checkpoint(stage2_path(out))
    pairs = make_pairs(_images(groups), sc.task, config.degradation, config.mask)
    _snapshot(config, out / "stage3")
    ckpt = train_stage3(config, stage2, pairs, log_path=out / "stage3" / f"{sc.task}.jsonl", progress=progress)
    print(f"wrote {save_checkpoint(ckpt, stage3_path(out, sc.task))}")
    return 0


def _load_mask(path: Path, dims: tuple[int, int]) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("L"))
    if arr.shape != dims:
        raise CommandError(f"mask {path} has size {arr.shape}, expected {dims}")
    return torch.from_numpy((arr > 127).astype(np.float32))


def cmd_restore(config: RunConfig, args) -> int:
    task = TASK_ALIASES[args.task]
    out_dir = Path(args.out) if args.out else config.resolved_output_dir() / "restored" / task
    ckpt_path = Path(args.checkpoint) if args.checkpoint else stage3_path(config.resolved_output_dir(), task)
    _require([ckpt_path], "stage 3 checkpoint")
    ckpt = load_checkpoint(ckpt_path).require_stage(3)
    if ckpt.task != task:
        raise CommandError(f"{ckpt_path} was trained for {ckpt.task}, not {task}")
    model = load_adacode_model(ckpt).eval()
    scale = int(ckpt.config["degradation"]["scale"])
    files = _input_files(Path(args.input))
    for i, path in enumerate(files):
        image = load_png(path)
        masks = None
        if task == "inpainting":
            dims = tuple(image.shape[-2:])
            if args.masks:
                mask = _load_mask(Path(args.masks) / path.name, dims)
            else:
                m = config.mask
                spec = MaskSpec(m.num_strokes, m.max_vertices, m.min_width, m.max_width, m.max_length, m.seed + i)
                mask = torch.from_numpy(generate_mask(spec, dims).astype(np.float32))
            image = apply_mask(image, mask)
            masks = mask.unsqueeze(0)
        result = restore(model, image.unsqueeze(0), task, masks, scale)
        save_png(result[0], out_dir / path.name)
        if args.weight_maps:
            dtype = next(model.decoder.parameters()).dtype
            x = model_input(task, image.unsqueeze(0).to(dtype), masks, tuple(result.shape[-2:]))
            with torch.no_grad():
                weights = model.weight_predictor(model.encoder(x))
            save_weight_maps(weights, out_dir / "weights", prefix=path.stem)
    _snapshot(config, out_dir)
    print(f"restored {len(files)} image(s) into {out_dir}")
    return 0


def cmd_eval(config: RunConfig, args) -> int:
    ckpt_path = Path(args.checkpoint)
    _require([ckpt_path], "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    task = TASK_ALIASES[args.task] if args.task else (ckpt.task if ckpt.stage == 3 else "reconstruction")
    root = Path(args.dataset) if args.dataset else Path(config.data.dataset_dir)
    if (root / "labels.txt").is_file():
        groups = load_dataset(root, config.data.mapping_file)
        names = [f"{label}/{i:05d}" for label, items in groups.items() for i in range(len(items))]
        images = [lp.patch for items in groups.values() for lp in items]
    else:
        files = _input_files(root)
        names = [p.stem for p in files]
        images = [load_png(p) for p in files]
    report = evaluate(task, ckpt, images, names, config.degradation, config.mask, grid_dir=args.grid_dir)
    out = Path(args.report) if args.report else config.resolved_output_dir() / f"eval_{task}.json"
    report.write(out)
    print(json.dumps(report.summary, sort_keys=True))
    return 0


def cmd_viz_codes(config: RunConfig, args) -> int:
    ckpt_path = Path(args.checkpoint)
    _require([ckpt_path], "checkpoint")
    ckpt = load_checkpoint(ckpt_path).require_stage(1, 2)
    if args.label not in ckpt.labels:
        raise CommandError(f"unknown codebook label {args.label!r}; available: {', '.join(ckpt.labels)}")
    if ckpt.stage == 1:
        model = load_stage1_model(ckpt)
        codebook = model.codebook
    else:
        model = load_adacode_model(ckpt)
        codebook = model.basis[model.basis.labels.index(args.label)]
    if args.indices:
        indices = args.indices
    else:
        gen = np.random.default_rng(config.seed)
        count = min(args.count, codebook.num_codes)
        indices = sorted(gen.choice(codebook.num_codes, size=count, replace=False).tolist())
    bad = [i for i in indices if not 0 <= i < codebook.num_codes]
    if bad:
        raise CommandError(f"indices {bad} out of range for codebook of size {codebook.num_codes}")
    tiles = [visualize_code(codebook, i, model.decoder) for i in indices]
    grid = torch.cat(tiles, dim=-1)
    out = Path(args.out) if args.out else config.resolved_output_dir() / f"codes_{args.label}.png"
    save_png(grid, out)
    print(f"wrote {len(tiles)} tile(s) to {out}")
    return 0


# --- argument parsing ----------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML config file layered over the preset")
    p.add_argument("--preset", default="desk", help="base preset: desk, tiny or paper")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, help="global seed; also seeds every stage")
    p.add_argument("--output-dir", help="output directory (relative paths honor ADACODE_OUTPUT_ROOT)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="adacode", description="Adaptive-codebook image restoration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write the procedural toy dataset")
    p.add_argument("--dataset-dir", help="destination directory")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--task", choices=("sr", "inpaint"), help="stage 3 task")
    p.add_argument("--dataset-dir")
    p.add_argument("--log-every", type=int, default=0, help="print losses every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", parents=[common], help="restore degraded images with a stage 3 model")
    p.add_argument("--task", choices=("sr", "inpaint"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--masks", help="directory of hole masks named like the inputs (white = hole)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--weight-maps", action="store_true", help="also write per-basis weight maps")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint with PSNR/SSIM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("reconstruction", "sr", "inpaint"))
    p.add_argument("--dataset", help="dataset directory or PNG directory")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--grid-dir", help="write side-by-side comparison grids here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-codes", parents=[common], help="decode individual code entries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--indices", type=int, nargs="+")
    p.add_argument("--count", type=int, default=10, help="random entries to draw when --indices is absent")
    p.add_argument("--out", help="PNG path")
    p.set_defaults(func=cmd_viz_codes)
    return parser


def resolve_config(args) -> RunConfig:
    """Preset, then config file, then ``--set``, then dedicated flags."""
    config = load_config(args.config, args.preset)
    config = apply_overrides(config, args.overrides)
    flags = []
    if args.seed is not None:
        flags += [f"seed={args.seed}"] + [f"stage{n}.seed={args.seed}" for n in (1, 2, 3)]
    if args.output_dir:
        flags.append(f"output_dir={args.output_dir}")
    if getattr(args, "dataset_dir", None):
        flags.append(f"data.dataset_dir={args.dataset_dir}")
    if getattr(args, "num_classes", None) is not None:
        flags.append(f"data.num_classes={args.num_classes}")
    if flags:
        config = apply_overrides(config, flags)
    if args.command == "train":
        if args.task:
            config = replace_stage(config, 3, task=TASK_ALIASES[args.task])
        if args.iterations is not None:
            if args.iterations < 0:
                raise ConfigError("--iterations must be >= 0")
            config = replace_stage(config, args.stage, iterations=args.iterations)
    return config


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CommandError, InvalidInputError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
