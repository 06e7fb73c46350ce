"""Pinhole cameras with camera-to-world poses.

Conventions (repo-wide): camera frame is +x right, +y down, +z forward;
pixel coordinates have their origin at the top-left of the image and pixel
``(row, col)`` is sampled at continuous coordinate ``(u=col, v=row)``.
Intrinsics are in pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MIN_DEPTH = 1e-6


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraParams:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-9 or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def with_pose(self, rotation, translation) -> "CameraParams":
        return CameraParams(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                            rotation, translation)

    def encoding(self) -> np.ndarray:
        """16 values: flattened rotation, translation, normalized intrinsics."""
        intr = [self.fx / self.width, self.fy / self.height,
                self.cx / self.width, self.cy / self.height]
        return np.concatenate([self.rotation.ravel(), self.translation, intr])


def project(point, cam: CameraParams):
    """World point -> ((u, v), camera-frame depth)."""
    x, y, z = cam.world_to_camera(point)
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {z} is behind the camera")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), float(z)


def unproject(pixel, depth: float, cam: CameraParams) -> np.ndarray:
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    p_cam = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.camera_to_world(p_cam)


def pixel_rays(cam: CameraParams):
    """Per-pixel ray directions (H, W, 3) in world space, scaled so that the
    camera-frame z component is 1 (ray parameter == camera depth)."""
    v, u = np.meshgrid(np.arange(cam.height, dtype=np.float64),
                       np.arange(cam.width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    return d_cam @ cam.rotation.T


def look_at(eye, target, up) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world (rotation, translation) with +z pointing eye -> target.

    ``up`` is the world direction that should appear *up* in the image, i.e.
    the camera's -y axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    z = fwd / n
    down = -np.asarray(up, dtype=np.float64)
    y = down - (down @ z) * z
    ny = np.linalg.norm(y)
    if ny < 1e-9 * max(1.0, np.linalg.norm(down)):
        raise ValueError("up vector is parallel to the viewing direction")
    y /= ny
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1), eye


def orbit_cameras(n: int, radius: float, width: int, height: int, fov_deg: float = 60.0,
                  elevation_deg: float = 20.0, azimuth0_deg: float = 0.0,
                  azimuth_step_deg: float | None = None) -> list[CameraParams]:
    """Inward-facing cameras on a circle around the origin (world -y is up)."""
    step = 360.0 / n if azimuth_step_deg is None else azimuth_step_deg
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for k in range(n):
        az = np.radians(azimuth0_deg + k * step)
        el = np.radians(elevation_deg)
        eye = radius * np.array([np.cos(el) * np.sin(az), -np.sin(el), -np.cos(el) * np.cos(az)])
        rot, t = look_at(eye, np.zeros(3), (0.0, -1.0, 0.0))
        cams.append(CameraParams(f, f, width / 2, height / 2, width, height, rot, t))
    return cams


def rotation_to_quaternion(r) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# text format: fx fy cx cy w h r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz

def format_camera(cam: CameraParams) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy]
    head = " ".join(repr(float(v)) for v in vals)
    rest = " ".join(repr(float(v)) for v in [*cam.rotation.ravel(), *cam.translation])
    return f"{head} {cam.width} {cam.height} {rest}"


def parse_camera(line: str) -> CameraParams:
    parts = line.split()
    if len(parts) != 18:
        raise ValueError(f"camera line needs 18 fields, got {len(parts)}")
    v = [float(p) for p in parts]
    return CameraParams(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]),
                        np.array(v[6:15]).reshape(3, 3), np.array(v[15:18]))


def write_cameras(path, cams: Sequence[CameraParams]) -> None:
    Path(path).write_text("".join(format_camera(c) + "\n" for c in cams))


def read_cameras(path) -> list[CameraParams]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    cams = [parse_camera(ln) for ln in lines]
    if len({(c.width, c.height) for c in cams}) > 1:
        raise ValueError("cameras in one scene must share the image size")
    return cams
