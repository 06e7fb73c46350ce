"""Gaussian decoding, placement, differentiable rasterization and render losses."""
from ._backend import BACKEND
from .gaussians import (
    GaussianScene,
    concat_scenes,
    depth_modulation,
    load_scene,
    place_gaussians,
    save_scene,
)
from .heads import C_GS, GaussianHeads, activate
from .losses import RenderLossConfig, loss_render, perceptual_distance
from .raster import TRAIN_T_MIN, project_gaussians, rasterize


def render_views(scene, cams, t_min: float = 0.0):
    """Rasterize ``scene`` into every camera; returns a list of images."""
    return [rasterize(scene, cam, t_min=t_min) for cam in cams]


def decode_heads(v, heads: GaussianHeads):
    """Latent (N, h, w, C_v) -> (raw Gaussian maps, positive depth maps)."""
    return heads(v)
