"""Prediction heads: unified latent -> per-pixel Gaussian parameters + depth."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

C_GS = 12
# raw channel layout
DEPTH_OFFSET = slice(0, 1)
SCALE = slice(1, 4)
QUAT = slice(4, 8)
OPACITY = slice(8, 9)
COLOR = slice(9, 12)
DEPTH_OFFSET_RANGE = 0.1
# log-depth is soft-bounded to depth_init * exp(+-DEPTH_LOG_RANGE)
DEPTH_LOG_RANGE = 1.5


class GaussianHeads(nn.Module):
    """Transposed-conv upsampler from token grid (h, w) to pixels (h*P, w*P)."""

    def __init__(self, latent_dim: int = 64, patch: int = 8, hidden: tuple = (48, 24),
                 s_max: float = 0.1, depth_init: float = 4.0,
                 color_init: float = 0.25):
        super().__init__()
        if patch % 2:
            raise ValueError("patch size must be even")
        self.patch = patch
        self.latent_dim = latent_dim
        self.s_max = s_max
        self.depth_init = depth_init
        self.up1 = nn.ConvTranspose2d(latent_dim, hidden[0], patch // 2, stride=patch // 2)
        self.up2 = nn.ConvTranspose2d(hidden[0], hidden[1], 2, stride=2)
        self.out = nn.Conv2d(hidden[1], C_GS + 1, 3, padding=1)
        with torch.no_grad():
            self.out.weight.mul_(0.1)
            bias = torch.zeros(C_GS + 1)
            bias[QUAT.start] = 1.0
            bias[OPACITY] = 1.0
            # starting near the data's mean brightness; from mid-grey the quickest
            # descent is to dim everything by pushing depth into its saturated bound
            bias[COLOR] = math.log(color_init / (1 - color_init))
            self.out.bias.copy_(bias)

    def forward(self, v: torch.Tensor):
        """``v`` (N, h, w, C_v) -> raw (N, H, W, 12), positive depth (N, H, W, 1)."""
        if v.dim() != 4 or v.shape[-1] != self.latent_dim:
            raise ValueError(f"latent of shape {tuple(v.shape)} does not match heads "
                             f"expecting (N, h, w, {self.latent_dim})")
        x = v.permute(0, 3, 1, 2)
        x = F.gelu(self.up1(x))
        x = F.gelu(self.up2(x))
        x = self.out(x).permute(0, 2, 3, 1)
        r = DEPTH_LOG_RANGE
        log_depth = math.log(self.depth_init) + r * torch.tanh(x[..., C_GS:] / r)
        return x[..., :C_GS], torch.exp(log_depth)

    def activate(self, raw: torch.Tensor, depth: torch.Tensor) -> dict:
        return activate(raw, depth, self.s_max)


def activate(raw: torch.Tensor, depth: torch.Tensor, s_max: float = 0.1) -> dict:
    """Map raw head outputs to constrained Gaussian parameters."""
    d = depth[..., 0] * torch.exp(DEPTH_OFFSET_RANGE * torch.tanh(raw[..., DEPTH_OFFSET][..., 0]))
    return {
        "depth": d,
        "scales": s_max * torch.sigmoid(raw[..., SCALE]),
        "quats": raw[..., QUAT],
        "opacity": torch.sigmoid(raw[..., OPACITY][..., 0]),
        "colors": torch.sigmoid(raw[..., COLOR]),
    }
