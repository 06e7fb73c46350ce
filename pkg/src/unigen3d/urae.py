"""Unified representation autoencoder: tokenizers, geometry encoder, semantic distillation.

The semantic teacher is a frozen random linear patch embedding. Appearance
tokens come from a small strided conv net aligned with the teacher grid; the
two are concatenated per token with the camera embedding and mixed by a
2-block transformer (per-view self-attention, then attention across all
views) into the unified latent ``V`` of shape (N, h, w, C_v).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .camera import CameraParams
from .numerics import RngStream, ShapeError, cosine_matrix, load_named_tensors, \
    rowwise_cosine, save_named_tensors
from .splat import TRAIN_T_MIN, GaussianHeads, RenderLossConfig, loss_render, \
    place_gaussians, rasterize

KINDS = ("semantic", "appearance", "sem_aligned")


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TokenGrid:
    kind: str
    tokens: torch.Tensor  # (N, h, w, C)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown token grid kind {self.kind!r}")
        if self.tokens.dim() != 4:
            raise ShapeError(f"token grid must be (N, h, w, C), got {tuple(self.tokens.shape)}")

    @property
    def shape(self):
        return tuple(self.tokens.shape)


@dataclass
class SemDistillConfig:
    m1: float = 0.05
    m2: float = 0.05
    lambda_mdms: float = 1.0
    lambda_sem: float = 0.1

    def __post_init__(self):
        for name in ("m1", "m2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.lambda_mdms < 0 or self.lambda_sem < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class UraeConfig:
    patch: int = 8
    token_dim: int = 32
    latent_dim: int = 64
    height: int = 64
    width: int = 64
    heads: int = 4
    blocks: int = 2
    use_appearance: bool = True
    s_max: float = 0.1

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch


def flatten_latent(v: torch.Tensor) -> torch.Tensor:
    """(N, h, w, C) -> (N, h*w, C), row-major over the token grid."""
    return v.reshape(v.shape[0], -1, v.shape[-1])


def unflatten_latent(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return x.reshape(x.shape[0], h, w, x.shape[-1])


def _as_images(images) -> torch.Tensor:
    x = torch.as_tensor(images)
    if not torch.is_floating_point(x):
        x = x.double()
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[-1] != 3 or x.shape[0] < 1:
        raise ShapeError(f"images must be (N, H, W, 3), got {tuple(x.shape)}")
    return x


# ---------------------------------------------------------------------------
# networks

class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.n1, self.n2, self.n3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.view_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        # residual branches start at zero so each block begins as the identity
        with torch.no_grad():
            for lin in (self.view_attn.out_proj, self.cross_attn.out_proj, self.mlp[2]):
                lin.weight.zero_()
                lin.bias.zero_()

    def forward(self, x):
        # x: (N, P, D)
        n, p, d = x.shape
        h = self.n1(x)
        x = x + self.view_attn(h, h, h, need_weights=False)[0]
        h = self.n2(x).reshape(1, n * p, d)
        x = x + self.cross_attn(h, h, h, need_weights=False)[0].reshape(n, p, d)
        return x + self.mlp(self.n3(x))


class GeometryEncoder(nn.Module):
    def __init__(self, in_dim: int, dim: int, n_tokens: int, heads: int, blocks: int):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, dim)
        self.cam_proj = nn.Linear(16, dim)
        self.pos = nn.Parameter(0.02 * torch.randn(n_tokens, dim))
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)

    def forward(self, tokens, cam_codes):
        n, h, w, c = tokens.shape
        x = self.in_proj(tokens.reshape(n, h * w, c)) + self.pos + self.cam_proj(cam_codes)[:, None]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).reshape(n, h, w, -1)


class URAE(nn.Module):
    """Encoder stack plus the Gaussian decoder heads."""

    def __init__(self, cfg: UraeConfig | None = None):
        super().__init__()
        cfg = cfg or UraeConfig()
        if cfg.height % cfg.patch or cfg.width % cfg.patch or cfg.patch % 4:
            raise ValueError("image size must be divisible by the patch size (a multiple of 4)")
        self.cfg = cfg
        c, p = cfg.token_dim, cfg.patch
        self.patchifier = nn.Linear(p * p * 3, c)
        self.patchifier.requires_grad_(False)  # frozen semantic teacher
        self.app1 = nn.Conv2d(3, c, p // 2, stride=p // 2)
        self.app2 = nn.Conv2d(c, c, 2, stride=2)
        h, w = cfg.grid
        self.geometry = GeometryEncoder(2 * c, cfg.latent_dim, h * w, cfg.heads, cfg.blocks)
        self.adapter = nn.Sequential(nn.Linear(c, 2 * c), nn.GELU(), nn.Linear(2 * c, cfg.latent_dim))
        self.heads = GaussianHeads(cfg.latent_dim, p, s_max=cfg.s_max)

    def encoder_modules(self):
        return [self.patchifier, self.app1, self.app2, self.geometry, self.adapter]

    def encoder_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("heads.")}

    def encode(self, images, cams: Sequence[CameraParams]):
        """Return (semantic grid, sem_aligned grid, unified latent)."""
        sem = patchify(images, self)
        app = encode_appearance(images, self) if self.cfg.use_appearance else None
        v = encode_geometry(sem, app, cams, self)
        return sem, sem_adapter(sem, self), v

    def decode(self, v: torch.Tensor, cams: Sequence[CameraParams]):
        raw, depth = self.heads(v)
        return place_gaussians(self.heads.activate(raw, depth), cams)


def patchify(images, model: URAE) -> TokenGrid:
    x = _as_images(images)
    n, hh, ww, _ = x.shape
    p = model.cfg.patch
    if hh % p or ww % p:
        raise ShapeError(f"image size {hh}x{ww} not divisible by patch {p}")
    x = x.to(model.patchifier.weight.dtype)
    patches = x.reshape(n, hh // p, p, ww // p, p, 3).permute(0, 1, 3, 2, 4, 5)
    return TokenGrid("semantic", model.patchifier(patches.reshape(n, hh // p, ww // p, p * p * 3)))


def encode_appearance(images, model: URAE, like: TokenGrid | None = None) -> TokenGrid:
    x = _as_images(images)
    p = model.cfg.patch
    if x.shape[1] % p or x.shape[2] % p:
        raise ShapeError(f"image size {x.shape[1]}x{x.shape[2]} not divisible by patch {p}")
    x = x.to(model.app1.weight.dtype).permute(0, 3, 1, 2)
    out = model.app2(F.gelu(model.app1(x))).permute(0, 2, 3, 1)
    grid = TokenGrid("appearance", out)
    if like is not None and like.shape != grid.shape:
        raise ShapeError(f"appearance grid {grid.shape} not aligned with {like.shape}")
    return grid


def encode_geometry(sem: TokenGrid, app: TokenGrid | None, cams: Sequence[CameraParams],
                    model: URAE) -> torch.Tensor:
    """Unified latent (N, h, w, C_v). ``app=None`` feeds zeros in its channels."""
    if sem.kind != "semantic":
        raise ValueError(f"expected a semantic grid, got {sem.kind}")
    tokens = sem.tokens
    if app is None:
        other = torch.zeros_like(tokens)
    else:
        if app.kind != "appearance":
            raise ValueError(f"expected an appearance grid, got {app.kind}")
        if app.shape != sem.shape:
            raise ShapeError(f"appearance grid {app.shape} not aligned with {sem.shape}")
        other = app.tokens
    if len(cams) != tokens.shape[0]:
        raise ShapeError(f"{tokens.shape[0]} views but {len(cams)} cameras")
    codes = torch.as_tensor(np.stack([c.encoding() for c in cams]), dtype=tokens.dtype)
    return model.geometry(torch.cat([tokens, other], dim=-1), codes)


def sem_adapter(sem: TokenGrid, model: URAE) -> TokenGrid:
    if not isinstance(sem, TokenGrid) or sem.kind != "semantic":
        raise ValueError("sem_adapter expects a semantic token grid")
    return TokenGrid("sem_aligned", model.adapter(sem.tokens))


# ---------------------------------------------------------------------------
# semantic distillation

def _tokens(x):
    return x.tokens if isinstance(x, TokenGrid) else x


def _check_pair(z, v):
    z, v = _tokens(z), _tokens(v)
    if tuple(z.shape) != tuple(v.shape):
        raise ShapeError(f"shape mismatch {tuple(z.shape)} vs {tuple(v.shape)}")
    if z.dim() != 4:
        raise ShapeError("expected (N, h, w, C) grids")
    return z, v


def loss_mcos(z_sem, v, cfg: SemDistillConfig | None = None):
    """Mean of ReLU(1 - m1 - cos(z, v)) over views and token positions."""
    cfg = cfg or SemDistillConfig()
    z, v = _check_pair(z_sem, v)
    return F.relu(1.0 - cfg.m1 - rowwise_cosine(z, v)).mean()


def loss_mdms(z_sem, v, cfg: SemDistillConfig | None = None):
    """Mean over views of mean_{p,q} ReLU(|cosZ(p,q) - cosV(p,q)| - m2), diagonal included."""
    cfg = cfg or SemDistillConfig()
    z, v = _check_pair(z_sem, v)
    zf, vf = flatten_latent(z), flatten_latent(v)
    gap = (cosine_matrix(zf, zf) - cosine_matrix(vf, vf)).abs()
    return F.relu(gap - cfg.m2).mean()


def loss_sem(z_sem, v, cfg: SemDistillConfig | None = None):
    cfg = cfg or SemDistillConfig()
    return loss_mcos(z_sem, v, cfg) + cfg.lambda_mdms * loss_mdms(z_sem, v, cfg)


def urae_objective(render_loss, sem_loss, cfg: SemDistillConfig | None = None):
    cfg = cfg or SemDistillConfig()
    for name, val in (("render_loss", render_loss), ("sem_loss", sem_loss)):
        if float(val.detach() if torch.is_tensor(val) else val) < 0:
            raise ValueError(f"{name} must be nonnegative, got {val}")
    return render_loss + cfg.lambda_sem * sem_loss


# ---------------------------------------------------------------------------
# training

@dataclass
class UraeTrainConfig:
    steps: int = 300
    lr: float = 2e-3
    lr_final: float = 2e-4
    n_novel: int = 2
    # attention blocks train slower: at full rate they wash out per-token detail
    block_lr_scale: float = 0.1
    t_min: float = TRAIN_T_MIN
    sem: SemDistillConfig = field(default_factory=SemDistillConfig)
    render: RenderLossConfig = field(default_factory=RenderLossConfig)


def scene_tensors(record, dtype=torch.float32):
    return torch.as_tensor(np.asarray(record.images), dtype=dtype), list(record.cameras)


def reconstruct(model: URAE, images, cams, t_min: float = 0.0):
    """Encode all views, decode, and re-render every input camera."""
    _, _, v = model.encode(images, cams)
    scene = model.decode(v, cams)
    return [rasterize(scene, cam, t_min=t_min) for cam in cams]


def linear_lr(opt, base: float, final: float, step: int, total: int):
    frac = step / max(1, total - 1)
    for g in opt.param_groups:
        g["lr"] = (base + (final - base) * frac) * g.get("lr_scale", 1.0)


def train_urae(records, model: URAE, cfg: UraeTrainConfig, rng: RngStream,
               log: Callable[[dict], None] | None = None) -> list[dict]:
    """Optimize the URAE objective; returns the per-step log rows.

    Each step draws one scene, encodes all its views jointly and supervises
    ``n_novel`` of them (drawn from the inputs) through the rasterizer.
    """
    if not records:
        raise ValueError("train_urae needs a nonempty dataset")
    data = [scene_tensors(r, model.patchifier.weight.dtype) for r in records]
    blocks = {id(p) for p in model.geometry.blocks.parameters()}
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam([
        {"params": [p for p in params if id(p) not in blocks]},
        {"params": [p for p in params if id(p) in blocks], "lr_scale": cfg.block_lr_scale},
    ], lr=cfg.lr)
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        linear_lr(opt, cfg.lr, cfg.lr_final, step, cfg.steps)
        images, cams = data[int(rng.integers(0, len(data)))]
        n = images.shape[0]
        views = np.sort(rng.permutation(n)[: min(cfg.n_novel, n)])
        _, z_sem, v = model.encode(images, cams)
        scene = model.decode(v, cams)
        rendered = [rasterize(scene, cams[k], t_min=cfg.t_min) for k in views]
        l_render = loss_render(rendered, [images[k] for k in views], cfg.render)
        l_sem = loss_sem(z_sem, v, cfg.sem)
        total = urae_objective(l_render, l_sem, cfg.sem)
        if not torch.isfinite(total):
            raise TrainingError(step, f"non-finite URAE loss {total.item()}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        row = {"step": step, "loss": total.item(), "render": l_render.item(),
               "sem": l_sem.item(), "time": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


# ---------------------------------------------------------------------------
# persistence

def save_model(path, model: nn.Module) -> None:
    save_named_tensors(path, {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})


def load_model(path, model: nn.Module) -> nn.Module:
    tensors = load_named_tensors(path)
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise ValueError(f"weights file lacks {sorted(missing)[:3]}")
    model.load_state_dict({k: torch.as_tensor(tensors[k]).to(state[k].dtype) for k in state})
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
