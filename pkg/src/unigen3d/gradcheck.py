"""Finite-difference suite over every differentiable loss and the rasterizer."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .camera import CameraParams, look_at
from .numerics import RngStream, finite_difference_check

STEP = 1e-5
LOSS_TOL = 1e-4
RASTER_TOL = 1e-3


def _check(fn: Callable[[torch.Tensor], torch.Tensor], point: np.ndarray, rng: RngStream,
           signature: Callable[[torch.Tensor], object] | None = None, flip: bool = False,
           max_coords: int = 64):
    """Autograd gradient of ``fn`` vs central differences.

    ``signature`` names the piecewise regime (ReLU pattern, footprint set);
    probes whose +-h evaluations land in another regime are skipped.
    """
    def f(x):
        with torch.no_grad():
            return float(fn(torch.as_tensor(x)))

    def grad(x):
        t = torch.as_tensor(x).requires_grad_(True)
        fn(t).backward()
        g = t.grad.numpy()
        return -g if flip else g

    skip = None
    if signature is not None:
        def skip(x, idx):
            base = signature(torch.as_tensor(x))
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[idx] += sgn * STEP
                if signature(torch.as_tensor(y)) != base:
                    return True
            return False
    return finite_difference_check(f, grad, point, step=STEP, max_coords=max_coords,
                                   rng=rng, skip=skip)


def _relu_pattern(arg: torch.Tensor):
    return tuple((arg > 0).flatten().tolist())


def _ops(rng: RngStream):
    from .diffusion import CvcConfig, cvc_correspondence, loss_cvc, loss_v, make_schedule
    from .numerics import cosine_matrix, rowwise_cosine
    from .splat import RenderLossConfig, loss_render, perceptual_distance
    from .urae import SemDistillConfig, flatten_latent, loss_mcos, loss_mdms

    g = rng.generator()
    sem = SemDistillConfig()
    shape = (2, 3, 3, 6)
    z = g.standard_normal(shape)
    v = z + 0.8 * g.standard_normal(shape)

    yield ("loss_mcos", LOSS_TOL, lambda x: loss_mcos(x, torch.as_tensor(v), sem), z,
           lambda x: _relu_pattern(1 - sem.m1 - rowwise_cosine(x, torch.as_tensor(v))))

    def mdms_arg(x):
        xf, vf = flatten_latent(x), flatten_latent(torch.as_tensor(v))
        return (cosine_matrix(xf, xf) - cosine_matrix(vf, vf)).abs() - sem.m2
    yield ("loss_mdms", LOSS_TOL, lambda x: loss_mdms(x, torch.as_tensor(v), sem), z,
           lambda x: _relu_pattern(mdms_arg(x)))

    img_gt = g.random((2, 8, 8, 3))
    img = np.clip(img_gt + 0.1 * g.standard_normal(img_gt.shape), 0, 1)
    rcfg = RenderLossConfig()
    yield ("loss_render", LOSS_TOL,
           lambda x: loss_render(list(x), list(torch.as_tensor(img_gt)), rcfg), img, None)
    yield ("perceptual_distance", LOSS_TOL,
           lambda x: perceptual_distance(x, torch.as_tensor(img_gt[0]), rcfg), img[0], None)

    sched = make_schedule(50)
    x0 = torch.as_tensor(g.standard_normal((16, 8)))
    eps = torch.as_tensor(g.standard_normal((16, 8)))
    t = 20
    x_t = float(sched.alphas[t]) * x0 + float(sched.sigmas[t]) * eps
    yield ("loss_v", LOSS_TOL, lambda x: loss_v(x, x_t, x0, eps, t, sched),
           (x0 + 0.3 * torch.as_tensor(g.standard_normal((16, 8)))).numpy(), None)

    cvc = CvcConfig(tau=0.5)
    c0 = x0 + 0.5 * torch.as_tensor(g.standard_normal((16, 8)))
    matches = cvc_correspondence(x0, c0, cvc)
    yield ("loss_cvc", LOSS_TOL, lambda x: loss_cvc(x, c0, matches, cvc),
           (x0 + 0.3 * torch.as_tensor(g.standard_normal((16, 8)))).numpy(), None)

    yield from _raster_ops(rng)


def reference_camera(size: int = 16) -> CameraParams:
    rot, eye = look_at(np.array([0.3, -0.4, -3.0]), np.zeros(3), (0.0, -1.0, 0.0))
    return CameraParams(14.0, 14.0, size / 2, size / 2, size, size, rot, eye)


def random_scene(g: np.random.Generator, n: int = 12):
    from .splat import GaussianScene
    q = g.standard_normal((n, 4))
    return GaussianScene(
        centers=torch.as_tensor(g.uniform(-0.6, 0.6, (n, 3))),
        scales=torch.as_tensor(g.uniform(0.08, 0.3, (n, 3))),
        quats=torch.as_tensor(q / np.linalg.norm(q, axis=1, keepdims=True)),
        opacities=torch.as_tensor(g.uniform(0.2, 0.9, n)),
        colors=torch.as_tensor(g.uniform(0.05, 0.95, (n, 3))),
    )


def _raster_ops(rng: RngStream):
    from .splat import GaussianScene, rasterize
    g = rng.generator()
    cam = reference_camera()
    base = random_scene(g)
    weight = torch.as_tensor(g.standard_normal((cam.height, cam.width, 3)))
    fields = ("centers", "scales", "quats", "opacities", "colors")

    for name in fields:
        def build(x, name=name):
            parts = {f: getattr(base, f) for f in fields}
            parts[name] = x.reshape(parts[name].shape)
            return GaussianScene(**parts)

        def fn(x, build=build):
            return (rasterize(build(x), cam) * weight).sum()

        def footprint(x, build=build):
            return rasterize(build(x), cam, return_info=True)[1]["footprint"]

        yield (f"rasterize[{name}]", RASTER_TOL, fn, getattr(base, name).numpy().copy(),
               footprint)


def run_suite(rng: RngStream, inject: str = "") -> list[dict]:
    """One row per checked operation. ``inject`` negates that op's analytic gradient."""
    rows = []
    for name, tol, fn, point, sig in _ops(rng):
        rep = _check(fn, np.asarray(point, dtype=np.float64), rng.split(len(rows)), sig,
                     flip=(name == inject or (inject and name.startswith(inject + "["))))
        rows.append({"op": name, "max_rel_error": rep.max_rel_error, "tol": tol,
                     "n_probes": rep.n_probes,
                     "passed": bool(rep.n_probes > 0 and rep.passed(tol))})
    return rows
