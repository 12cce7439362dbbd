"""Acceptance criteria, one test per criterion; each prints a single pass/fail line."""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from adacode.adaptive import BasisSet, combine, quantize_all
from adacode.checkpoint import tensor_group_hash
from adacode.codebook import VectorCodebook, quantize
from adacode.config import apply_overrides, preset, replace_stage
from adacode.data import ToyDataSpec, synthesize_toy_dataset
from adacode.losses import (
    adversarial_losses,
    code_level_loss,
    generator_adversarial_loss,
    info_nce,
    l1_loss,
    perceptual_loss,
    semantic_loss,
    stage1_objective,
    stage2_objective,
    stage3_objective,
    style_loss,
)
from adacode.metrics import evaluate, psnr, ssim
from adacode.networks import upsample_input
from adacode.training import (
    build_stage1_model,
    load_adacode_model,
    make_pairs,
    merged_codebook,
    restore,
    stage1_losses,
    train_stage1,
    train_stage2,
    train_stage3,
)

from conftest import reference_ssim, relative_error, sample_parameter_coords, small_config, toy_groups

SEEDS = (0, 1, 2)
# stage II steps for the ordering study; stage I uses the tiny preset's 300
ORDERING_STAGE2_STEPS = 800


# --- 1 ---------------------------------------------------------------------------


def exhaustive_indices(latent: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Nearest entry per position by full search; ``argmin`` keeps the lowest index on ties."""
    flat = latent.transpose(0, 2, 3, 1).reshape(-1, codebook.shape[1])
    dist = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    return dist.argmin(axis=1).reshape(latent.shape[0], *latent.shape[2:])


def test_criterion_1_quantizer_oracle(verdict):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    agree = 0
    total = 1000
    for i in range(total):
        n = int(rng.integers(1, 65))
        d = int(rng.integers(1, 9))
        h, w = (int(v) for v in rng.integers(1, 5, size=2))
        if i % 2:
            # small integer grid with duplicated rows: many exact ties
            codebook = rng.integers(-2, 3, size=(n, d)).astype(np.float64)
            codebook[rng.integers(0, n, size=n // 2)] = codebook[0]
            latent = rng.integers(-2, 3, size=(2, d, h, w)).astype(np.float64)
        else:
            codebook = rng.standard_normal((n, d))
            latent = rng.standard_normal((2, d, h, w))
        q, idx = quantize(torch.from_numpy(latent), torch.from_numpy(codebook))
        expected = exhaustive_indices(latent, codebook)
        same_idx = np.array_equal(idx.numpy(), expected)
        same_q = np.array_equal(q.numpy(), codebook[expected].transpose(0, 3, 1, 2))
        agree += same_idx and same_q
    elapsed = time.perf_counter() - start
    ok = verdict(1, agree == total and elapsed < 10, f"{agree}/{total} agree, {elapsed:.2f} s")
    assert ok


# --- 2 ---------------------------------------------------------------------------


def test_criterion_2_straight_through_gradient(verdict):
    start = time.perf_counter()
    cfg = small_config()
    sc = cfg.stage1
    model = build_stage1_model(cfg, "checker")
    x = toy_groups(cfg)["checker"][:2].double()

    total, _, out = stage1_losses(model, x, sc, adv_active=True)
    params = [p for p in model.encoder.parameters()]
    for p in model.parameters():
        p.grad = None
    total.backward()
    analytic = {id(p): p.grad.detach().clone() for p in params}

    # stop-gradient quantities frozen at the base point
    z0 = out["continuous"].detach()
    q0 = out["quantized"].detach()
    offset = q0 - z0

    def surrogate():
        z = model.encoder(x)
        recon = model.decoder(z + offset)
        vq = F.mse_loss(q0, z0) + sc.beta * F.mse_loss(z, q0)
        return stage1_objective(
            l1_loss(recon, x),
            perceptual_loss(recon, x, model.features),
            generator_adversarial_loss(model.discriminator(recon)),
            vq,
            semantic_loss(z, x, model.conv_proj, model.features),
            lam=sc.lam,
        )[0]

    with torch.no_grad():
        assert abs(surrogate().item() - total.item()) < 1e-12
        # central-difference step: roundoff ~1e-16/h stays far below the smallest sampled gradients
        h = 1e-5
        errors = []
        for p, i in sample_parameter_coords(params, 60, torch.Generator().manual_seed(0)):
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = surrogate().item()
            flat[i] = orig - h
            down = surrogate().item()
            flat[i] = orig
            errors.append(relative_error(analytic[id(p)].view(-1)[i].item(), (up - down) / (2 * h)))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    ok = verdict(2, worst < 1e-4 and len(errors) >= 50 and elapsed < 60,
                 f"{len(errors)} parameters, max relative error {worst:.2e}, {elapsed:.1f} s")
    assert ok


# --- 3 ---------------------------------------------------------------------------


def test_criterion_3_one_hot_reduction(verdict):
    g = torch.Generator().manual_seed(0)
    exact = 0
    for case in range(100):
        k = int(torch.randint(1, 5, (1,), generator=g))
        d = int(torch.randint(1, 9, (1,), generator=g))
        books = []
        for j in range(k):
            n = int(torch.randint(1, 33, (1,), generator=g))
            cb = VectorCodebook(n, d, f"c{j}").double()
            with torch.no_grad():
                cb.entries.copy_(torch.randn(n, d, generator=g, dtype=torch.float64))
            books.append(cb)
        basis = BasisSet(books)
        z = torch.randn(2, d, 3, 4, generator=g, dtype=torch.float64)
        pick = case % k
        weights = torch.zeros(2, k, 3, 4, dtype=torch.float64)
        weights[:, pick] = 1.0
        blended = combine([q for q, _ in quantize_all(z, basis)], weights)
        single, _ = quantize(z, basis[pick].entries)
        exact += torch.equal(blended, single)
    ok = verdict(3, exact == 100, f"{exact}/100 bit-exact")
    assert ok


# --- 4 ---------------------------------------------------------------------------


def test_criterion_4_freeze_contracts(verdict):
    cfg = small_config()
    groups = toy_groups(cfg)
    mixed = torch.cat(list(groups.values()))
    stage1 = [train_stage1(replace_stage(cfg, 1, iterations=5), images, label) for label, images in groups.items()]
    before = {ck.labels[0]: tensor_group_hash(ck.groups["codebooks"]) for ck in stage1}
    s2 = train_stage2(replace_stage(cfg, 2, iterations=100), stage1, mixed)
    after = {label: tensor_group_hash({label: s2.groups["codebooks"][label]}) for label in s2.labels}
    stage2_ok = before == after

    pairs = make_pairs(mixed[:4], "super_resolution", cfg.degradation, cfg.mask)
    s3 = train_stage3(replace_stage(cfg, 3, iterations=100), s2, pairs)
    stage3_ok = all(
        tensor_group_hash(s3.groups[name]) == tensor_group_hash(s2.groups[name]) for name in ("decoder", "codebooks")
    )
    ok = verdict(4, stage2_ok and stage3_ok, f"stage II codebooks {'unchanged' if stage2_ok else 'CHANGED'}, "
                 f"stage III decoder and codebooks {'unchanged' if stage3_ok else 'CHANGED'}")
    assert ok


# --- 5 and 6 ---------------------------------------------------------------------


def ordering_config(seed: int):
    return apply_overrides(
        preset("tiny"),
        [f"seed={seed}", f"stage1.seed={seed}", f"stage2.seed={seed}", f"stage2.iterations={ORDERING_STAGE2_STEPS}"],
    )


def ordering_run(seed: int) -> dict:
    """Stage II AdaCode, merged codebook, single-basis and per-class stage I PSNRs on one mixed set."""
    cfg = ordering_config(seed)
    d = cfg.data
    data = synthesize_toy_dataset(ToyDataSpec(d.num_classes, d.patches_per_class, d.patch_size), seed=seed)
    groups = {label: torch.stack([lp.patch for lp in items]) for label, items in data.items()}
    mixed = torch.cat(list(groups.values()))
    stage1 = [train_stage1(cfg, images, label) for label, images in groups.items()]

    def score(ckpt):
        return evaluate("reconstruction", ckpt, mixed).summary["mean_psnr"]

    ada = train_stage2(cfg, stage1, mixed)
    merged = train_stage2(cfg, [merged_codebook(stage1)], mixed)
    single = train_stage2(apply_overrides(cfg, [f"stage2.basis_subset=[{stage1[0].labels[0]}]"]), stage1, mixed)
    return {
        "adacode": score(ada),
        "merged": score(merged),
        "small": max(score(ck) for ck in stage1),
        "single_basis": score(single),
        "stage2": ada,
        "mixed": mixed,
        "config": cfg,
    }


@pytest.fixture(scope="session")
def ordering_study():
    start = time.perf_counter()
    runs = {seed: ordering_run(seed) for seed in SEEDS}
    return runs, time.perf_counter() - start


def test_criterion_5_table1_ordering(ordering_study, verdict):
    runs, elapsed = ordering_study
    mean = {key: float(np.mean([r[key] for r in runs.values()])) for key in ("adacode", "merged", "small")}
    ok = mean["adacode"] >= mean["merged"] - 0.1 and mean["merged"] >= mean["small"] and elapsed < 1800
    detail = (
        f"mean PSNR adacode {mean['adacode']:.2f} dB, merged {mean['merged']:.2f} dB, "
        f"small {mean['small']:.2f} dB over seeds {list(SEEDS)}, {elapsed / 60:.1f} min"
    )
    assert verdict(5, ok, detail)


def test_criterion_6_basis_count_trend(ordering_study, verdict):
    runs, _ = ordering_study
    three = float(np.mean([r["adacode"] for r in runs.values()]))
    one = float(np.mean([r["single_basis"] for r in runs.values()]))
    assert verdict(6, three >= one, f"mean PSNR with 3 bases {three:.2f} dB, with 1 basis {one:.2f} dB")


# --- 7 ---------------------------------------------------------------------------


def vec(*values):
    return torch.tensor(values, dtype=torch.float64).view(1, len(values), 1, 1)


def test_criterion_7_loss_identities(verdict):
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    b = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    grid = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)
    perm = torch.randperm(9, generator=g)
    shuffled = grid.reshape(1, 4, 9)[..., perm].reshape(1, 4, 3, 3)
    features = torch.nn.Conv2d(3, 2, 1).double().requires_grad_(False)
    projection = torch.nn.Conv2d(3, 2, 1).double()
    with torch.no_grad():
        projection.load_state_dict(features.state_dict())
    lam, beta = 0.125, 0.5
    terms = {k: torch.tensor(v, dtype=torch.float64) for k, v in dict(l1=0.375, per=0.25, adv=-1.5, vq=0.125, sem=2.0).items()}
    code = torch.tensor(0.75, dtype=torch.float64)
    z, z_gt, cont = vec(1.0, 1.0), vec(0.0, 0.0), vec(1.0, 2.0)
    pair = torch.cat([vec(1.0, 0.0), vec(0.0, 1.0)])
    isolated = code_level_loss(pair, pair.clone(), pair.clone(), None)
    _, code_terms_b = code_level_loss(z, z_gt, cont, None, beta=beta)
    _, code_terms_2b = code_level_loss(z, z_gt, cont, None, beta=2 * beta)

    checks = {
        "l1 equal inputs": l1_loss(a, a).item() == 0.0,
        "l1 constants 0 and 0.5": l1_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 3, 2, 2), 0.5)).item() == 0.5,
        "l1 symmetric": l1_loss(a, b).item() == l1_loss(b, a).item(),
        "perceptual equal inputs": perceptual_loss(a, a, features).item() == 0.0,
        "perceptual symmetric": perceptual_loss(a, b, features).item() == perceptual_loss(b, a, features).item(),
        "hinge saturated": adversarial_losses(torch.full((4,), 1e6), torch.full((4,), -1e6))[1].item() == 0.0,
        "hinge zero logits": [t.item() for t in adversarial_losses(torch.zeros(4), torch.zeros(4))] == [0.0, 2.0],
        "generator loss decreasing": all(
            adversarial_losses(torch.zeros(1), torch.full((1,), v + 0.5))[0]
            < adversarial_losses(torch.zeros(1), torch.full((1,), v))[0]
            for v in (-2.0, 0.0, 3.0)
        ),
        "semantic zero at match": semantic_loss(a, a, projection, features).item() == 0.0,
        "semantic non-negative": semantic_loss(a, b, projection, features).item() >= 0.0,
        "infonce symmetric case ln 2": abs(info_nce(vec(1.0, 0.0), vec(1.0, 1.0), [vec(1.0, -1.0)]).item() - math.log(2)) < 1e-9,
        "infonce tau 1": abs(info_nce(vec(1.0, 0.0), vec(2.0, 0.0), [vec(0.0, 3.0)], tau=1.0).item()
                             + math.log(math.e / (math.e + 1))) < 1e-9,
        "infonce small tau": info_nce(vec(1.0, 0.0), vec(1.0, 0.0), [vec(0.0, 1.0)], tau=1e-3).item() < 1e-12,
        "style equal inputs": style_loss(grid, grid).item() == 0.0,
        "style permutation": abs(style_loss(grid, shuffled).item()) < 1e-9,
        "style constants": style_loss(torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2)).item() == 1.0,
        "code loss term isolation": isolated[1]["style"].item() == 0.0
        and isolated[1]["commit"].item() == 0.0
        and isolated[0].item() == isolated[1]["infonce"].item() > 0.0,
        "commitment by hand": code_terms_b["commit"].item() == 0.5 * 2.5,
        "commitment linear in beta": code_terms_2b["commit"].item() == 2 * code_terms_b["commit"].item(),
        "stage objectives all zero": all(
            f[0] == 0
            for f in (stage1_objective(0, 0, 0, 0, 0), stage2_objective(0, 0, 0, 0), stage3_objective(0, 0, 0, 0))
        ),
        "stage1 lambda zero": stage1_objective(**terms, lam=0.0)[0].item() == 0.75,
        "stage1 lambda doubling": (
            stage1_objective(**terms, lam=2 * lam)[0] - stage1_objective(**terms, lam=lam)[0]
        ).item() == (lam * (terms["adv"] + terms["sem"])).item(),
        "stage2 is stage1 without semantic": stage2_objective(
            terms["l1"], terms["per"], terms["adv"], terms["vq"], lam=lam
        )[0].item() == (stage1_objective(**terms, lam=lam)[0] - lam * terms["sem"]).item(),
        "stage3 lambda zero": stage3_objective(terms["l1"], terms["per"], terms["adv"], code, lam=0.0)[0].item() == 1.375,
        "stage3 linear in lambda": (
            stage3_objective(terms["l1"], terms["per"], terms["adv"], code, lam=2 * lam)[0]
            - stage3_objective(terms["l1"], terms["per"], terms["adv"], code, lam=lam)[0]
        ).item() == (lam * terms["adv"]).item(),
    }
    failed = [name for name, ok in checks.items() if not ok]
    detail = f"{len(checks) - len(failed)}/{len(checks)} identities hold" + (f"; failed: {failed}" if failed else "")
    assert verdict(7, not failed, detail)


# --- 8 ---------------------------------------------------------------------------


def test_criterion_8_overfit_sanity(ordering_study, verdict):
    runs, _ = ordering_study
    run = runs[SEEDS[0]]
    cfg = replace_stage(run["config"], 3, iterations=2000)
    hr = run["mixed"][:1]
    pair = make_pairs(hr, "super_resolution", cfg.degradation, cfg.mask)
    ckpt = train_stage3(cfg, run["stage2"], pair)
    restored = restore(load_adacode_model(ckpt), pair.degraded, "super_resolution", scale=cfg.degradation.scale)
    naive = upsample_input(pair.degraded, tuple(hr.shape[-2:]))
    ours, base = psnr(restored, hr), psnr(naive, hr)
    assert verdict(8, ours > base + 1.0, f"restored {ours:.2f} dB vs bicubic {base:.2f} dB after 2000 steps")


# --- 9 ---------------------------------------------------------------------------


def test_criterion_9_determinism(verdict):
    cfg = small_config(iterations=100)
    groups = toy_groups(cfg)
    mixed = torch.cat(list(groups.values()))

    def pipeline():
        stage1 = [train_stage1(cfg, images, label) for label, images in groups.items()]
        s2 = train_stage2(cfg, stage1, mixed)
        s3 = train_stage3(cfg, s2, make_pairs(mixed[:4], "super_resolution", cfg.degradation, cfg.mask))
        return [ck.log for ck in stage1] + [s2.log, s3.log]

    first, second = pipeline(), pipeline()
    same = [a == b for a, b in zip(first, second)]
    steps = [len(log) for log in first]
    assert verdict(9, all(same) and all(n == 100 for n in steps),
                   f"{sum(same)}/{len(same)} runs reproduce their {steps[0]}-step loss logs exactly")


# --- 10 --------------------------------------------------------------------------


def test_criterion_10_metrics(verdict):
    base = torch.full((3, 16, 16), 0.25, dtype=torch.float64)
    psnr_20 = psnr(base + 0.1, base)
    psnr_6 = psnr(base + 0.5, base)
    psnr_ok = abs(psnr_20 - 20.0) < 1e-6 and abs(psnr_6 - 10 * math.log10(4)) < 1e-6
    g = torch.Generator().manual_seed(10)
    gaps = []
    for _ in range(10):
        a = torch.rand(3, 24, 24, generator=g, dtype=torch.float64)
        b = (a + 0.15 * torch.randn(3, 24, 24, generator=g, dtype=torch.float64)).clamp(0, 1)
        gaps.append(abs(ssim(a, b) - reference_ssim(a.numpy(), b.numpy())))
    ok = psnr_ok and max(gaps) < 1e-4
    assert verdict(10, ok, f"PSNR {psnr_20:.6f} and {psnr_6:.6f} dB, max SSIM gap {max(gaps):.1e} over 10 pairs")
