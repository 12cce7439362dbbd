"""Training objectives and their per-stage compositions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .codebook import vq_loss
from .errors import InvalidInputError

__all__ = [
    "LossWeights",
    "l1_loss",
    "perceptual_loss",
    "adversarial_losses",
    "semantic_loss",
    "info_nce",
    "gram_matrix",
    "style_loss",
    "vq_loss",
    "code_level_loss",
    "stage1_objective",
    "stage2_objective",
    "stage3_objective",
]


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1
    beta: float = 0.25
    tau: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise InvalidInputError("lam and beta must be non-negative")
        if self.tau <= 0:
            raise InvalidInputError("tau must be positive")


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def perceptual_loss(a: Tensor, b: Tensor, features: Callable[[Tensor], Tensor]) -> Tensor:
    """Mean squared distance between feature maps of ``a`` and ``b``."""
    _same_shape(a, b)
    return F.mse_loss(features(a), features(b))


def adversarial_losses(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """Hinge GAN losses, returned as ``(generator_loss, discriminator_loss)``.

    The discriminator term should be evaluated on detached fakes by the
    caller; the generator term on non-detached fakes.
    """
    disc = F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()
    gen = -fake_logits.mean()
    return gen, disc


def generator_adversarial_loss(fake_logits: Tensor) -> Tensor:
    return -fake_logits.mean()


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def semantic_loss(
    latent: Tensor,
    image: Tensor,
    projection: Callable[[Tensor], Tensor],
    features: Callable[[Tensor], Tensor],
) -> Tensor:
    projected = projection(latent)
    with torch.no_grad():
        target = features(image)
    if projected.shape != target.shape:
        raise InvalidInputError(
            f"projected latent {tuple(projected.shape)} does not match features {tuple(target.shape)}"
        )
    return F.mse_loss(projected, target)


def _flat_unit(x: Tensor) -> Tensor:
    flat = x.reshape(-1)
    norm = flat.norm()
    if norm == 0:
        raise InvalidInputError("cosine similarity undefined for a zero-norm grid")
    return flat / norm


def info_nce(anchor: Tensor, positive: Tensor, negatives: Sequence[Tensor], tau: float = 0.1) -> Tensor:
    """Contrastive loss of one anchor against one positive and >=1 negatives.

    Each grid is flattened and compared by cosine similarity.
    """
    if not negatives:
        raise InvalidInputError("info_nce needs at least one negative")
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    for other in (positive, *negatives):
        _same_shape(anchor, other)
    a = _flat_unit(anchor)
    sims = torch.stack([a @ _flat_unit(x) for x in (positive, *negatives)]) / tau
    # -log softmax at the positive slot
    return torch.logsumexp(sims, dim=0) - sims[0]


def gram_matrix(x: Tensor) -> Tensor:
    """Channel Gram matrix normalized by spatial size: ``(..., C, C)``."""
    *lead, c, h, w = x.shape
    flat = x.reshape(*lead, c, h * w)
    return flat @ flat.transpose(-1, -2) / (h * w)


def style_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared Gram difference, averaged over batch and channel pairs."""
    _same_shape(a, b)
    return F.mse_loss(gram_matrix(a), gram_matrix(b))


def batch_info_nce(
    z: Tensor, z_gt: Tensor, source_ids: Sequence[int] | None = None, tau: float = 0.1
) -> Tensor:
    """InfoNCE averaged over a batch with in-batch negatives.

    For sample ``i`` the positive is ``z_gt[i]``; negatives are ``z_gt[j]`` and
    ``z[j]`` for every ``j`` whose source image differs from ``i``'s. Samples
    without any such ``j`` contribute zero.
    """
    _same_shape(z, z_gt)
    b = z.shape[0]
    ids = list(range(b)) if source_ids is None else list(source_ids)
    terms = []
    for i in range(b):
        negs = [t[j] for j in range(b) if ids[j] != ids[i] for t in (z_gt, z)]
        if negs:
            terms.append(info_nce(z[i], z_gt[i], negs, tau))
    if not terms:
        return z.new_zeros(())
    return torch.stack(terms).sum() / b


def code_level_loss(
    z: Tensor,
    z_gt: Tensor,
    continuous: Tensor,
    source_ids: Sequence[int] | None = None,
    tau: float = 0.1,
    beta: float = 0.25,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Contrastive + style + commitment loss pulling degraded codes to HR codes.

    Args:
        z: blended representation of the degraded input.
        z_gt: blended representation of the HR image from the frozen model.
        continuous: pre-quantization encoder output for the degraded input.
    """
    _same_shape(z, z_gt)
    _same_shape(continuous, z_gt)
    target = z_gt.detach()
    terms = {
        "infonce": batch_info_nce(z, target, source_ids, tau),
        "style": style_loss(target, z),
        "commit": beta * F.mse_loss(continuous, target),
    }
    return terms["infonce"] + terms["style"] + terms["commit"], terms


def _weighted_total(terms: Mapping[str, Tensor | float], weights: Mapping[str, float]) -> Tensor | float:
    total = 0.0
    for name, w in weights.items():
        value = terms[name]
        total = total + (value if w == 1.0 else w * value)
    return total


def stage1_objective(
    l1, per, adv, vq, sem, lam: float = 0.1
) -> tuple[Tensor | float, dict[str, Tensor | float]]:
    """``l1 + per + lam*adv + vq + lam*sem`` and the named term breakdown."""
    terms = {"l1": l1, "per": per, "adv": adv, "vq": vq, "sem": sem}
    total = _weighted_total(terms, {"l1": 1.0, "per": 1.0, "adv": lam, "vq": 1.0, "sem": lam})
    return total, terms


def stage2_objective(l1, per, adv, vq, lam: float = 0.1) -> tuple[Tensor | float, dict[str, Tensor | float]]:
    """``l1 + per + lam*adv + vq``; the caller detaches the codebook side of ``vq``."""
    terms = {"l1": l1, "per": per, "adv": adv, "vq": vq}
    total = _weighted_total(terms, {"l1": 1.0, "per": 1.0, "adv": lam, "vq": 1.0})
    return total, terms


def stage3_objective(l1, per, adv, code, lam: float = 0.1) -> tuple[Tensor | float, dict[str, Tensor | float]]:
    terms = {"l1": l1, "per": per, "adv": adv, "code": code}
    total = _weighted_total(terms, {"l1": 1.0, "per": 1.0, "adv": lam, "code": 1.0})
    return total, terms
