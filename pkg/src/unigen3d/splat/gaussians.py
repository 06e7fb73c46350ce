"""World-space Gaussian scenes and placement of decoded per-pixel Gaussians."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..camera import CameraParams, rotation_to_quaternion

SCENE_MAGIC = b"UGS1"
# scene units; opacity is attenuated by exp(-depth / DEPTH_FAR)
DEPTH_FAR = 20.0


@dataclass
class GaussianScene:
    centers: torch.Tensor    # (G, 3)
    scales: torch.Tensor     # (G, 3), positive
    quats: torch.Tensor      # (G, 4) unit, (w, x, y, z)
    opacities: torch.Tensor  # (G,) in (0, 1)
    colors: torch.Tensor     # (G, 3) in (0, 1)

    def __len__(self):
        return self.centers.shape[0]

    @classmethod
    def empty(cls, dtype=torch.float64):
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0), z(0, 3))

    def detach(self) -> "GaussianScene":
        return GaussianScene(*(t.detach() for t in self.tensors()))

    def tensors(self):
        return self.centers, self.scales, self.quats, self.opacities, self.colors

    def permute(self, perm) -> "GaussianScene":
        perm = torch.as_tensor(perm)
        return GaussianScene(*(t[perm] for t in self.tensors()))

    def transformed(self, rotation, translation) -> "GaussianScene":
        """Apply the rigid map p -> R p + t to every Gaussian."""
        dtype = self.centers.dtype
        r = torch.as_tensor(np.asarray(rotation), dtype=dtype)
        t = torch.as_tensor(np.asarray(translation), dtype=dtype)
        q = torch.as_tensor(rotation_to_quaternion(rotation), dtype=dtype)
        return GaussianScene(self.centers @ r.T + t, self.scales,
                             quaternion_multiply(q.expand_as(self.quats), self.quats),
                             self.opacities, self.colors)


def concat_scenes(scenes: Sequence[GaussianScene]) -> GaussianScene:
    return GaussianScene(*(torch.cat(parts) for parts in zip(*(s.tensors() for s in scenes))))


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """(G, 4) quaternions (w, x, y, z), normalized internally -> (G, 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(*q.shape[:-1], 3, 3)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def depth_modulation(depth: torch.Tensor) -> torch.Tensor:
    """Monotone decreasing opacity factor derived from the decoded depth."""
    return torch.exp(-depth / DEPTH_FAR)


def place_gaussians(params: dict, cams: Sequence[CameraParams]) -> GaussianScene:
    """Lift activated per-pixel Gaussian maps into one world-space scene.

    ``params`` holds activated maps from :func:`heads.activate`: ``depth``
    (N,H,W), ``scales`` (N,H,W,3), ``quats`` (N,H,W,4), ``opacity`` (N,H,W),
    ``colors`` (N,H,W,3). Gaussian order is view-major, then row-major pixels.
    """
    depth = params["depth"]
    n, h, w = depth.shape
    if len(cams) != n:
        raise ValueError(f"{n} decoded views but {len(cams)} cameras")
    dtype = depth.dtype
    v, u = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype),
                          indexing="ij")
    centers, quats = [], []
    for k, cam in enumerate(cams):
        d = depth[k]
        p_cam = torch.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], dim=-1)
        rot = torch.as_tensor(cam.rotation, dtype=dtype)
        trans = torch.as_tensor(cam.translation, dtype=dtype)
        centers.append((p_cam @ rot.T + trans).reshape(-1, 3))
        q_cam = torch.as_tensor(rotation_to_quaternion(cam.rotation), dtype=dtype)
        q = params["quats"][k].reshape(-1, 4)
        q = q / q.norm(dim=-1, keepdim=True)
        quats.append(quaternion_multiply(q_cam.expand_as(q), q))
    opacity = params["opacity"] * depth_modulation(depth)
    return GaussianScene(
        centers=torch.cat(centers),
        scales=params["scales"].reshape(-1, 3),
        quats=torch.cat(quats),
        opacities=opacity.reshape(-1),
        colors=params["colors"].reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# "UGS1" then per Gaussian 14 little-endian f32: center, scale, quat, opacity, rgb

def save_scene(path, scene: GaussianScene) -> None:
    rows = torch.cat([scene.centers, scene.scales, scene.quats,
                      scene.opacities[:, None], scene.colors], dim=1)
    payload = np.ascontiguousarray(rows.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(payload.tobytes())


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as fh:
        if fh.read(4) != SCENE_MAGIC:
            raise ValueError("not a UGS1 file")
        body = fh.read()
    if len(body) % 56:
        raise ValueError("truncated UGS1 payload")
    rows = np.frombuffer(body, dtype="<f4").reshape(-1, 14)
    t = torch.from_numpy(rows.astype(np.float64))
    return GaussianScene(t[:, 0:3], t[:, 3:6], t[:, 6:10], t[:, 10], t[:, 11:14])
