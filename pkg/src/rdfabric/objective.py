"""Distillation objective: per-pixel normalized distance, layer means, weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import torch
import torch.nn.functional as F

EPS = 1e-12


@dataclass
class LossWeights:
    alpha: List[float] = field(default_factory=lambda: [0.4, 0.3, 0.2, 0.1])
    lambda_sspcab: float = 0.1

    def __post_init__(self):
        self.alpha = [float(a) for a in self.alpha]
        if any(a < 0 for a in self.alpha) or not any(a > 0 for a in self.alpha):
            raise ValueError(f"alpha must be non-negative with at least one positive entry: {self.alpha}")
        if self.lambda_sspcab < 0:
            raise ValueError("lambda_sspcab must be non-negative")


@dataclass
class LossBreakdown:
    per_layer: List[torch.Tensor]
    distill_total: torch.Tensor
    sspcab: torch.Tensor
    grand_total: torch.Tensor

    def as_log(self, step: int) -> dict:
        return {
            "step": step,
            "per_layer": [float(v.detach()) for v in self.per_layer],
            "distill_total": float(self.distill_total.detach()),
            "sspcab": float(self.sspcab.detach()),
            "grand_total": float(self.grand_total.detach()),
        }


def pixel_distance_map(t_feat: torch.Tensor, s_feat: torch.Tensor) -> torch.Tensor:
    """Half squared distance of channel-normalized vectors, per pixel.

    Works on B x C x H x W (returns B x H x W) or C x H x W (returns H x W).
    Equal to 1 - cos(t, s). Where exactly one vector is zero the value is
    pinned to 1, and to 0 where both are.
    """
    if t_feat.shape != s_feat.shape:
        raise ValueError(f"shape mismatch {tuple(t_feat.shape)} vs {tuple(s_feat.shape)}")
    dim = -3
    t_n = F.normalize(t_feat, p=2, dim=dim, eps=EPS)
    s_n = F.normalize(s_feat, p=2, dim=dim, eps=EPS)
    m = 0.5 * (t_n - s_n).pow(2).sum(dim=dim)
    t_zero = t_feat.eq(0).all(dim=dim)
    s_zero = s_feat.eq(0).all(dim=dim)
    return torch.where(t_zero ^ s_zero, torch.ones_like(m), m)


def layer_loss(m: torch.Tensor) -> torch.Tensor:
    """Mean over the spatial map; batched maps (B x H x W) are averaged over the batch too."""
    if m.numel() == 0:
        raise ValueError("empty distance map")
    return m.mean()


def sspcab_loss(sspcab_in: torch.Tensor, sspcab_out: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(sspcab_out, sspcab_in)


def total_loss(per_layer: Sequence[torch.Tensor], weights: LossWeights,
               sspcab_in=None, sspcab_out=None) -> LossBreakdown:
    if len(per_layer) != len(weights.alpha):
        raise ValueError(f"{len(per_layer)} layer losses for {len(weights.alpha)} weights")
    per_layer = [torch.as_tensor(v) for v in per_layer]
    distill = sum(a * v for a, v in zip(weights.alpha, per_layer))
    if sspcab_in is None:
        ssp = torch.zeros_like(distill)
    else:
        ssp = sspcab_loss(sspcab_in, sspcab_out)
    return LossBreakdown(per_layer, distill, ssp, distill + weights.lambda_sspcab * ssp)


def distillation_loss(teacher: Sequence[torch.Tensor], student: Sequence[torch.Tensor],
                      weights: LossWeights, sspcab_in=None, sspcab_out=None) -> LossBreakdown:
    per_layer = [layer_loss(pixel_distance_map(t, s)) for t, s in zip(teacher, student)]
    return total_loss(per_layer, weights, sspcab_in, sspcab_out)


def per_sample_losses(teacher: Sequence[torch.Tensor], student: Sequence[torch.Tensor],
                      weights: LossWeights, sspcab_in=None, sspcab_out=None) -> torch.Tensor:
    """Grand total for every sample of a batch separately (length-B vector)."""
    if len(teacher) != len(weights.alpha):
        raise ValueError(f"{len(teacher)} layers for {len(weights.alpha)} weights")
    total = sum(a * pixel_distance_map(t, s).mean(dim=(-2, -1))
                for a, t, s in zip(weights.alpha, teacher, student))
    if sspcab_in is not None:
        total = total + weights.lambda_sspcab * (sspcab_out - sspcab_in).pow(2).mean(dim=(1, 2, 3))
    return total
