"""Rendering objective with a pyramid gradient metric standing in for LPIPS."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class RenderLossConfig:
    lambda_lpips: float = 0.05
    perceptual_levels: int = 3

    def __post_init__(self):
        if self.lambda_lpips < 0:
            raise ValueError("lambda_lpips must be nonnegative")
        if self.perceptual_levels < 1:
            raise ValueError("perceptual_levels must be >= 1")


def _pool(img: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return img
    lead = img.shape[:-3]
    x = img.reshape(-1, *img.shape[-3:]).permute(0, 3, 1, 2)
    x = F.avg_pool2d(x, factor)
    return x.permute(0, 2, 3, 1).reshape(*lead, *x.shape[2:], img.shape[-1])


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, cfg: RenderLossConfig | None = None):
    """Sum over pyramid levels of pooled-image MSE plus finite-difference MSE.

    Level ``l`` average-pools by ``2**l``; images are (..., H, W, C).
    """
    cfg = cfg or RenderLossConfig()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(())
    for level in range(cfg.perceptual_levels):
        factor = 2 ** level
        if factor > min(a.shape[-3], a.shape[-2]):
            break
        pa, pb = _pool(a, factor), _pool(b, factor)
        d = pa - pb
        total = total + (d ** 2).mean()
        if d.shape[-2] > 1:
            total = total + ((d[..., :, 1:, :] - d[..., :, :-1, :]) ** 2).mean()
        if d.shape[-3] > 1:
            total = total + ((d[..., 1:, :, :] - d[..., :-1, :, :]) ** 2).mean()
    return total


def loss_render(rendered, gt, cfg: RenderLossConfig | None = None):
    """Mean over views of MSE + lambda_lpips * perceptual distance."""
    cfg = cfg or RenderLossConfig()
    if len(rendered) == 0:
        raise ValueError("loss_render needs at least one view")
    if len(rendered) != len(gt):
        raise ValueError("rendered and ground-truth view lists differ in length")
    terms = []
    for r, g in zip(rendered, gt):
        term = ((r - g) ** 2).mean()
        if cfg.lambda_lpips:
            term = term + cfg.lambda_lpips * perceptual_distance(r, g, cfg)
        terms.append(term)
    return torch.stack(terms).mean()
