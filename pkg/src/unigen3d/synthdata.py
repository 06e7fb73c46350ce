"""Synthetic multi-view scenes: analytic ray casting, dataset files, image metrics."""
from __future__ import annotations

import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import CameraParams, look_at, pixel_rays, read_cameras, write_cameras
from .numerics import RngStream, ShapeError

DEPTH_MAGIC = b"ULD1"
PSNR_CAP = 99.0
LIGHT_DIR = np.array([0.3, -1.0, -0.5]) / np.linalg.norm([0.3, -1.0, -0.5])
AMBIENT = 0.35
RAY_EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    kind: str              # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray       # sphere: (r, r, r); box: half extents
    albedo: np.ndarray


@dataclass
class SyntheticScene:
    primitives: list
    background: np.ndarray
    seed: int = 0
    light_dir: np.ndarray = field(default_factory=lambda: LIGHT_DIR.copy())


@dataclass
class SceneRecord:
    images: np.ndarray     # (N, H, W, 3) in [0, 1]
    depths: np.ndarray     # (N, H, W); 0 where nothing was hit
    hits: np.ndarray       # (N, H, W) bool
    cameras: list
    scene: SyntheticScene | None = None


def generate_scene(seed: int) -> SyntheticScene:
    rng = RngStream(seed)
    n = int(rng.integers(3, 9))
    prims = []
    for _ in range(n):
        kind = "sphere" if rng.uniform() < 0.5 else "box"
        direction = rng.normal(3)
        direction /= np.linalg.norm(direction)
        center = direction * 1.3 * rng.uniform() ** (1 / 3)
        if kind == "sphere":
            size = np.full(3, rng.uniform(0.3, 0.7))
        else:
            size = rng.uniform(0.2, 0.6, 3)
        prims.append(Primitive(kind, center, size, rng.uniform(0.15, 0.95, 3)))
    return SyntheticScene(prims, rng.uniform(0.0, 0.35, 3), seed=int(seed))


def scene_cameras(seed: int, n_views: int, height: int, width: int,
                  fov_deg: float = 60.0) -> list[CameraParams]:
    """Inward-facing orbit arc with jittered radius, elevation and spacing."""
    rng = RngStream(seed).split(1)
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    az = rng.uniform(0.0, 360.0)
    cams = []
    for _ in range(n_views):
        radius = rng.uniform(4.2, 4.8)
        el = np.radians(rng.uniform(15.0, 30.0))
        a = np.radians(az)
        eye = radius * np.array([np.cos(el) * np.sin(a), -np.sin(el), -np.cos(el) * np.cos(a)])
        rot, t = look_at(eye, np.zeros(3), (0.0, -1.0, 0.0))
        cams.append(CameraParams(f, f, width / 2, height / 2, width, height, rot, t))
        az += 30.0 + rng.uniform(-5.0, 5.0)
    return cams


def _intersect_sphere(o, d, prim):
    oc = o - prim.center
    a = (d * d).sum(-1)
    b = 2.0 * (d @ oc)
    c = oc @ oc - prim.size[0] ** 2
    disc = b * b - 4 * a * c
    t = np.full(d.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    near = np.where(t0 > RAY_EPS, t0, t1)
    hit = ok & (near > RAY_EPS)
    t[hit] = near[hit]
    normals = (o + np.where(hit, t, 0.0)[:, None] * d - prim.center) / prim.size[0]
    return t, normals


def _intersect_box(o, d, prim):
    lo, hi = prim.center - prim.size, prim.center + prim.size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin_axis = np.minimum(t1, t2)
    tmax_axis = np.maximum(t1, t2)
    tmin = tmin_axis.max(-1)
    tmax = tmax_axis.min(-1)
    enter = tmin > RAY_EPS
    tn = np.where(enter, tmin, tmax)
    hit = (tmax >= tmin) & (tn > RAY_EPS)
    t = np.where(hit, tn, np.inf)
    axis = np.where(enter, tmin_axis.argmax(-1), tmax_axis.argmin(-1))
    normals = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    normals[rows, axis] = -np.sign(d[rows, axis])
    return t, normals


def cast_rays(scene: SyntheticScene, origin, dirs):
    """Nearest hit along ``origin + t * dirs``: (t, normals, albedo), t=inf on miss."""
    best = np.full(dirs.shape[0], np.inf)
    normals = np.zeros_like(dirs)
    albedo = np.tile(scene.background, (dirs.shape[0], 1)).astype(np.float64)
    for prim in scene.primitives:
        fn = _intersect_sphere if prim.kind == "sphere" else _intersect_box
        t, n = fn(origin, dirs, prim)
        closer = t < best
        best[closer] = t[closer]
        normals[closer] = n[closer]
        albedo[closer] = prim.albedo
    return best, normals, albedo


def render_gt(scene: SyntheticScene, cams: Sequence[CameraParams], height: int,
              width: int) -> SceneRecord:
    images, depths, hits = [], [], []
    light = np.asarray(scene.light_dir, dtype=np.float64)
    for cam in cams:
        if (cam.height, cam.width) != (height, width):
            raise ShapeError("camera image size does not match requested resolution")
        dirs = pixel_rays(cam).reshape(-1, 3)
        t, n, albedo = cast_rays(scene, cam.center, dirs)
        hit = np.isfinite(t)
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(n @ light, 0.0, None)
        color = np.where(hit[:, None], albedo * shade[:, None], scene.background)
        images.append(np.clip(color, 0.0, 1.0).reshape(height, width, 3))
        depths.append(np.where(hit, t, 0.0).reshape(height, width))
        hits.append(hit.reshape(height, width))
    return SceneRecord(np.stack(images), np.stack(depths), np.stack(hits), list(cams), scene)


# ---------------------------------------------------------------------------
# file formats

def write_ppm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    raw = np.frombuffer(data[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def quantize(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def write_depth(path, depth, hit) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(hit, dtype=np.uint8).tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        if fh.read(4) != DEPTH_MAGIC:
            raise ValueError(f"{path}: bad depth magic")
        h, w = struct.unpack("<II", fh.read(8))
        depth = np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w)
        hit = np.frombuffer(fh.read(h * w), dtype=np.uint8).reshape(h, w).astype(bool)
    return depth.astype(np.float32), hit


@dataclass
class Manifest:
    entries: list  # (scene_id, split, seed)

    def ids(self, split: str | None = None) -> list[str]:
        return [sid for sid, sp, _ in self.entries if split in (None, "all", sp)]

    def seed(self, scene_id: str) -> int:
        return next(s for sid, _, s in self.entries if sid == scene_id)

    def split_of(self, scene_id: str) -> str:
        return next(sp for sid, sp, _ in self.entries if sid == scene_id)


def split_counts(n_scenes: int) -> tuple[int, int]:
    """90/10 train/test split; at least one test scene once there are two."""
    n_test = 0 if n_scenes < 2 else max(1, int(round(0.1 * n_scenes)))
    return n_scenes - n_test, n_test


def make_dataset(n_scenes: int, n_views: int, height: int, width: int, root_seed: int,
                 out_dir) -> Manifest:
    """Write scenes to ``out_dir`` atomically (staged in a sibling temp dir)."""
    out_dir = Path(out_dir)
    root = RngStream(root_seed)
    seeds = [int(root.split(k).integers(0, 2**62)) for k in range(n_scenes)]
    perm = RngStream(root_seed).split(10**6).permutation(n_scenes)
    _, n_test = split_counts(n_scenes)
    test_ids = set(int(i) for i in perm[:n_test])
    entries = [(f"{k:04d}", "test" if k in test_ids else "train", seeds[k])
               for k in range(n_scenes)]

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.tmp-", dir=out_dir.parent))
    try:
        for sid, _, seed in entries:
            record = render_gt(generate_scene(seed), scene_cameras(seed, n_views, height, width),
                               height, width)
            write_record(stage / f"scene_{sid}", record)
        (stage / "manifest.txt").write_text(
            "".join(f"{sid} {split} {seed}\n" for sid, split, seed in entries))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(stage, out_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return Manifest(entries)


def write_record(scene_dir, record: SceneRecord) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    for k in range(record.images.shape[0]):
        write_ppm(scene_dir / f"view_{k}.ppm", record.images[k])
        write_depth(scene_dir / f"depth_{k}.uld", record.depths[k], record.hits[k])
    write_cameras(scene_dir / "cameras.txt", record.cameras)


def read_manifest(root) -> Manifest:
    entries = []
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if line.strip():
            sid, split, seed = line.split()
            entries.append((sid, split, int(seed)))
    return Manifest(entries)


def load_record(root, scene_id: str) -> SceneRecord:
    scene_dir = Path(root) / f"scene_{scene_id}"
    cams = read_cameras(scene_dir / "cameras.txt")
    images, depths, hits = [], [], []
    for k in range(len(cams)):
        images.append(read_ppm(scene_dir / f"view_{k}.ppm"))
        d, h = read_depth(scene_dir / f"depth_{k}.uld")
        depths.append(d)
        hits.append(h)
    return SceneRecord(np.stack(images), np.stack(depths), np.stack(hits), cams)


# ---------------------------------------------------------------------------
# metrics

def metric_psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img, w):
    k = w.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ w


def metric_ssim(a, b, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), valid region, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValueError("SSIM needs images of at least 11x11")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = k1 ** 2, k2 ** 2
    w = _gaussian_window()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        vx = _filter_valid(x * x, w) - mx * mx
        vy = _filter_valid(y * y, w) - my * my
        cxy = _filter_valid(x * y, w) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))
