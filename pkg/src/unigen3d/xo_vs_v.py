"""Single-scene overfitting: x0-output vs v-output denoisers at matched everything."""
from __future__ import annotations

import numpy as np
import torch

from .diffusion import (CvcConfig, Denoiser, DenoiserConfig, DiffusionTrainConfig,
                        LatentNormalizer, LatentScene, encode_scenes, make_schedule,
                        train_diffusion)
from .numerics import RngStream

TAIL = 100  # final loss = mean over the last TAIL steps


def overfit(scene: LatentScene, cfg: DenoiserConfig, steps: int, seed: int, batch: int = 8,
            lr: float = 1e-3, t_diff: int = 50) -> list[float]:
    """Train on one scene with the pure v-space loss; returns the per-step loss."""
    rng = RngStream(seed)
    torch.manual_seed(rng.torch_seed())
    model = Denoiser(cfg)
    tcfg = DiffusionTrainConfig(steps=steps, batch=batch, lr=lr, lr_final=lr / 10,
                                cvc=CvcConfig(lambda_cvc=0.0))
    rows = train_diffusion(model, [scene], make_schedule(t_diff), tcfg, rng)
    return [r["loss_v"] for r in rows]


def final_loss(curve) -> float:
    return float(np.mean(curve[-TAIL:]))


def latent_scene(record, latent_dim: int, seed: int, patch: int = 8) -> LatentScene:
    """Standardized latents of one scene from a randomly initialized encoder of width ``latent_dim``."""
    from .urae import URAE, UraeConfig
    torch.manual_seed(RngStream(seed).torch_seed())
    h, w = record.images.shape[1:3]
    urae = URAE(UraeConfig(patch=patch, latent_dim=latent_dim, height=h, width=w))
    scene = encode_scenes(urae, [record])[0]
    return LatentNormalizer.fit([scene]).apply(scene)


def compare_parameterizations(run) -> list[dict]:
    from .cli import _records
    cfg = run.cfg
    _, records = _records(run, "train")
    scene = latent_scene(records[0], cfg.xo_latent_dim, cfg.seed, cfg.patch)
    h, w = cfg.height // cfg.patch, cfg.width // cfg.patch
    curves = {}
    for output in ("x0", "v"):
        dcfg = DenoiserConfig(latent_dim=cfg.xo_latent_dim, n_tokens=h * w, width=cfg.den_width,
                              blocks=cfg.den_blocks, output=output)
        curves[output] = overfit(scene, dcfg, cfg.xo_steps, cfg.seed, cfg.diff_batch, cfg.diff_lr,
                                 cfg.t_diff)
    return [{"step": i, "loss_x0": a, "loss_v": b}
            for i, (a, b) in enumerate(zip(curves["x0"], curves["v"]))]
