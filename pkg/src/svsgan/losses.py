"""Generator and discriminator objectives.

Expectations are realised as means over pixels (and over the batch). The OASIS
discriminator segments real images into ``N`` classes and labels every pixel of a
generated image with the extra class ``N`` (0-indexed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

LossReport = dict  # name -> float


@dataclass
class LossWeights:
    vgg: float = 10.0
    fm: float = 10.0
    flow: float = 10.0
    warp: float = 10.0
    perceptual_layers: Sequence[float] | None = None  # beta_l; uniform when None
    fm_layers: Sequence[float] | None = None  # alpha_l; uniform per discriminator when None

    def validate(self) -> None:
        for name in ("vgg", "fm", "flow", "warp"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")
        for name in ("perceptual_layers", "fm_layers"):
            seq = getattr(self, name)
            if seq is not None and any(v < 0 for v in seq):
                raise ValidationError(f"{name} must be non-negative")


def class_weights(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Inverse per-pixel frequency weights, ``total / (count_c * n_present)``; 0 for absent classes."""
    if labels.numel() == 0:
        raise ValidationError("class weights need a non-empty label batch")
    counts = torch.bincount(labels.reshape(-1), minlength=num_classes)
    if counts.numel() > num_classes:
        raise ValidationError(f"labels exceed num_classes={num_classes}")
    counts = counts.to(torch.float64)
    present = counts > 0
    n_present = present.sum()
    alpha = torch.zeros(num_classes, dtype=torch.float64, device=labels.device)
    alpha[present] = labels.numel() / (counts[present] * n_present)
    return alpha


def _check_logits(logits: torch.Tensor, num_classes: int) -> None:
    if logits.dim() != 4 or logits.shape[1] != num_classes + 1:
        raise DimensionError(
            f"expected (B, {num_classes + 1}, H, W) logits, got {tuple(logits.shape)}")


def _weighted_ce(logits: torch.Tensor, labels: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    # pixel mean of alpha[label] * -log softmax(logits)[label]
    ce = F.cross_entropy(logits, labels, reduction="none")
    return (alpha.to(ce.dtype)[labels] * ce).mean()


def oasis_d_loss(logits_real, logits_fake, labels, alpha) -> torch.Tensor:
    n = alpha.numel()
    _check_logits(logits_real, n)
    _check_logits(logits_fake, n)
    real = _weighted_ce(logits_real, labels, alpha)
    fake_target = torch.full(logits_fake.shape[:1] + logits_fake.shape[2:], n,
                             dtype=torch.long, device=logits_fake.device)
    fake = F.cross_entropy(logits_fake, fake_target)
    return real + fake


def oasis_g_loss(logits_fake, labels, alpha) -> torch.Tensor:
    _check_logits(logits_fake, alpha.numel())
    return _weighted_ce(logits_fake, labels, alpha)


def _flatten(xs) -> list[torch.Tensor]:
    if isinstance(xs, torch.Tensor):
        return [xs]
    out = []
    for x in xs:
        out.extend(_flatten(x))
    return out


def video_adv_losses(real_patches, fake_patches, mode: str = "hinge"):
    """(d_loss, g_loss) summed over discriminators and patch levels.

    ``real_patches``/``fake_patches`` are (nested) lists of logit tensors in matching order.
    ``mode="bce"`` gives the saturating sigmoid cross-entropy form.
    """
    real, fake = _flatten(real_patches), _flatten(fake_patches)
    if len(real) != len(fake):
        raise DimensionError("real and fake patch lists differ in length")
    d = g = 0.0
    for r, f in zip(real, fake):
        if mode == "hinge":
            d = d + F.relu(1 - r).mean() + F.relu(1 + f).mean()
            g = g - f.mean()
        elif mode == "bce":
            d = d + F.softplus(-r).mean() + F.softplus(f).mean()
            g = g + F.softplus(-f).mean()
        else:
            raise ValidationError(f"unknown adversarial mode {mode!r}")
    return d, g


def generator_adv_loss(fake_patches, mode: str = "hinge") -> torch.Tensor:
    g = 0.0
    for f in _flatten(fake_patches):
        g = g + (-f.mean() if mode == "hinge" else F.softplus(-f).mean())
    return g


def _layer_l1(feats_a, feats_b, weights) -> torch.Tensor:
    if len(feats_a) != len(feats_b):
        raise DimensionError("feature lists differ in length")
    if weights is None:
        weights = [1.0 / len(feats_a)] * len(feats_a)
    if len(weights) != len(feats_a):
        raise DimensionError(f"{len(weights)} layer weights for {len(feats_a)} layers")
    total = 0.0
    for w, a, b in zip(weights, feats_a, feats_b):
        total = total + w * (a - b).abs().mean()
    return total


def perceptual_loss(fake, real, extractor, betas=None) -> torch.Tensor:
    """sum_l beta_l * mean|phi_l(fake) - phi_l(real)| over a frozen extractor."""
    return _layer_l1(extractor(fake), extractor(real), betas)


def feature_matching_loss(feats_fake, feats_real, alphas=None) -> torch.Tensor:
    """sum_l alpha_l * mean|fake_l - real_l|; the real branch carries no gradient."""
    return _layer_l1(feats_fake, [f.detach() for f in feats_real], alphas)


def flow_warp_terms(pred_flow, gt_flow, warped, target, lam_flow=10.0, lam_warp=10.0):
    if pred_flow.shape != gt_flow.shape:
        raise DimensionError(f"flow {tuple(pred_flow.shape)} vs gt {tuple(gt_flow.shape)}")
    if warped.shape != target.shape:
        raise DimensionError(f"warped {tuple(warped.shape)} vs target {tuple(target.shape)}")
    return (lam_flow * (pred_flow - gt_flow).abs().mean(),
            lam_warp * (warped - target).abs().mean())


def flow_warp_loss(pred_flow, gt_flow, warped, target, lam_flow=10.0, lam_warp=10.0):
    f, w = flow_warp_terms(pred_flow, gt_flow, warped, target, lam_flow, lam_warp)
    return f + w


def total_generator_loss(parts: dict, weights: LossWeights):
    """L_G = L_GI + L_adv + L_flow + lam_vgg * L_vgg + lam_fm * L_fm.

    ``parts`` holds unweighted ``image_adv`` (OASIS or patch term), ``adv``, ``vgg``, ``fm``
    and the already weighted ``flow_warp``.
    """
    return (parts["image_adv"] + parts["adv"] + parts["flow_warp"]
            + weights.vgg * parts["vgg"] + weights.fm * parts["fm"])


class PerceptualExtractor(nn.Module):
    """Frozen, fixed-seed random conv stack standing in for a pretrained VGG."""

    def __init__(self, channels: Iterable[int] = (16, 32, 32, 64, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            bound = math.sqrt(6.0 / (cin * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            layers = [nn.AvgPool2d(2)] if i > 0 else []
            stages.append(nn.Sequential(*layers, conv, nn.LeakyReLU(0.2)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
