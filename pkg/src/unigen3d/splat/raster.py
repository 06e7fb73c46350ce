"""EWA splatting: 3D Gaussians -> screen-space ellipses -> composited image.

Projection runs in torch (autograd handles the perspective Jacobian and
covariance algebra); the per-pixel compositing runs in the selected kernel
(compiled or numpy) wrapped as a custom autograd function.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch

from ..camera import CameraParams
from . import _backend
from .gaussians import GaussianScene, quaternion_to_rotation

NEAR_PLANE = 0.01
# screen-space dilation (px^2) keeps sub-pixel Gaussians visible
DILATION = 0.3
# transmittance cutoff for the training profile; 0 disables early termination
TRAIN_T_MIN = 1e-4


def project_gaussians(scene: GaussianScene, cam: CameraParams):
    """Screen-space means (G,2), 2D covariances (G,2,2) and camera depths (G,)."""
    dtype = scene.centers.dtype
    rot = torch.as_tensor(cam.rotation, dtype=dtype)
    trans = torch.as_tensor(cam.translation, dtype=dtype)
    pc = (scene.centers - trans) @ rot
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zs = z.clamp(min=NEAR_PLANE)
    means = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)

    rg = quaternion_to_rotation(scene.quats)
    m = rot.T @ rg * scene.scales[:, None, :]          # R^T R_g S
    cov_cam = m @ m.transpose(1, 2)
    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / zs**2], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / zs**2], -1),
    ], dim=1)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2)
    cov2d = cov2d + DILATION * torch.eye(2, dtype=dtype)
    return means, cov2d, z


def _conics(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def _bboxes(means, cov2d, width, height):
    # non-finite Gaussians get an empty box and are culled
    m = np.nan_to_num(means.detach().cpu().numpy().astype(np.float64), nan=-1e9)
    cv = np.nan_to_num(cov2d.detach().cpu().numpy().astype(np.float64), nan=0.0)
    ext_x = 3.0 * np.sqrt(cv[:, 0, 0])
    ext_y = 3.0 * np.sqrt(cv[:, 1, 1])
    bbox = np.stack([
        np.floor(m[:, 0] - ext_x), np.ceil(m[:, 0] + ext_x),
        np.floor(m[:, 1] - ext_y), np.ceil(m[:, 1] + ext_y),
    ], axis=1)
    bbox[:, 0:2] = np.clip(bbox[:, 0:2], -1, width)
    bbox[:, 2:4] = np.clip(bbox[:, 2:4], -1, height)
    bbox[:, 0] = np.maximum(bbox[:, 0], 0)
    bbox[:, 1] = np.minimum(bbox[:, 1], width - 1)
    bbox[:, 2] = np.maximum(bbox[:, 2], 0)
    bbox[:, 3] = np.minimum(bbox[:, 3], height - 1)
    return bbox.astype(np.int64)


def _np64(t):
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conics, opacity, colors, order, bbox, height, width, t_min, kernel):
        arrays = [_np64(means), _np64(conics), _np64(opacity), _np64(colors)]
        image, alpha, state = kernel.forward(*arrays, order, bbox, height, width, float(t_min))
        ctx.kernel, ctx.state, ctx.arrays = kernel, state, arrays
        out_alpha = torch.from_numpy(alpha).to(means.dtype)
        ctx.mark_non_differentiable(out_alpha)
        return torch.from_numpy(image).to(means.dtype), out_alpha

    @staticmethod
    def backward(ctx, grad_image, grad_alpha):
        g = np.ascontiguousarray(grad_image.detach().cpu().numpy(), dtype=np.float64)
        gm, gc, go, gcol = ctx.kernel.backward(ctx.state, g, *ctx.arrays)
        dtype = grad_image.dtype
        return (torch.from_numpy(gm).to(dtype), torch.from_numpy(gc).to(dtype),
                torch.from_numpy(go).to(dtype), torch.from_numpy(gcol).to(dtype),
                None, None, None, None, None, None)


def _footprint_signature(state) -> str:
    h = hashlib.sha1(np.ascontiguousarray(state["gauss"]).tobytes())
    layout = state.get("offsets", state.get("pix"))
    h.update(np.ascontiguousarray(layout).tobytes())
    return h.hexdigest()


def rasterize(scene: GaussianScene, cam: CameraParams, t_min: float = 0.0,
              kernel=None, return_info: bool = False):
    """Render ``scene`` from ``cam`` to an (H, W, 3) image on a black background.

    ``t_min`` > 0 enables early termination once transmittance drops below
    it (training profile); the default keeps every contribution so that
    gradients are exact.
    """
    if cam.width < 1 or cam.height < 1:
        raise ValueError("camera has zero image size")
    kernel = kernel or _backend.kernel
    height, width = cam.height, cam.width
    dtype = scene.centers.dtype
    if dtype != torch.float64:
        # near-plane Jacobians reach 1e5; the conic determinant cancels in float32
        image = rasterize(GaussianScene(*(t.double() for t in scene.tensors())), cam, t_min,
                          kernel, return_info)
        if return_info:
            image, info = image
            info["alpha"] = info["alpha"].to(dtype)
            return image.to(dtype), info
        return image.to(dtype)
    info = {"n_visible": 0, "footprint": None, "alpha": torch.zeros(height, width, dtype=dtype)}

    if len(scene) == 0:
        image = torch.zeros(height, width, 3, dtype=dtype)
        return (image, info) if return_info else image

    means, cov2d, depth = project_gaussians(scene, cam)
    bbox = _bboxes(means, cov2d, width, height)
    depth_np = depth.detach().cpu().numpy().astype(np.float64)
    visible = (depth_np > NEAR_PLANE) & (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
    idx = np.flatnonzero(visible)
    if idx.size == 0:
        image = torch.zeros(height, width, 3, dtype=dtype) + 0.0 * scene.colors.sum()
        return (image, info) if return_info else image

    sel = torch.from_numpy(idx)
    order = np.argsort(depth_np[idx], kind="stable").astype(np.int64)
    image, alpha = _Composite.apply(
        means[sel], _conics(cov2d[sel]), scene.opacities[sel], scene.colors[sel],
        order, np.ascontiguousarray(bbox[idx]), height, width, t_min, kernel,
    )
    if return_info:
        info["n_visible"] = int(idx.size)
        info["alpha"] = alpha
        # recomputed without grad; cheap relative to the debugging it enables
        _, _, state = kernel.forward(
            _np64(means[sel]), _np64(_conics(cov2d[sel])), _np64(scene.opacities[sel]),
            _np64(scene.colors[sel]), order, np.ascontiguousarray(bbox[idx]), height, width,
            float(t_min))
        info["footprint"] = _footprint_signature(state)
        return image, info
    return image
