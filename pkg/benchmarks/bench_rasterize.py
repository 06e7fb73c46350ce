"""Compiled vs pure-Python compositing core: forward and forward+backward timings.

    python benchmarks/bench_rasterize.py [--gaussians 4096 16384] [--size 64] [--repeat 5]
"""
import argparse
import time

import numpy as np
import torch

from unigen3d.camera import orbit_cameras
from unigen3d.splat import _backend, rasterize
from unigen3d.splat.gaussians import GaussianScene


def random_scene(n, seed=0):
    g = np.random.default_rng(seed)
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    q = g.standard_normal((n, 4))
    return GaussianScene(
        centers=t(g.uniform(-1, 1, (n, 3))),
        scales=t(g.uniform(0.01, 0.06, (n, 3))),
        quats=t(q / np.linalg.norm(q, axis=1, keepdims=True)),
        opacities=t(g.uniform(0.2, 0.9, n)),
        colors=t(g.uniform(0, 1, (n, 3))),
    )


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--gaussians", type=int, nargs="+", default=[1024, 4096, 16384])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    if _backend.compiled_kernel is None:
        print("compiled extension not built; only the python core is timed")
    kernels = {"python": _backend.python_kernel, "compiled": _backend.compiled_kernel}
    cam = orbit_cameras(1, 3.0, args.size, args.size)[0]
    print(f"{'gaussians':>9} {'core':>9} {'forward ms':>11} {'fwd+bwd ms':>11}")
    for n in args.gaussians:
        base = random_scene(n)
        for name, kernel in kernels.items():
            if kernel is None:
                continue

            def fwd():
                with torch.no_grad():
                    rasterize(base, cam, kernel=kernel)

            def fwd_bwd():
                scene = GaussianScene(*(x.clone().requires_grad_(True) for x in base.tensors()))
                rasterize(scene, cam, kernel=kernel).sum().backward()

            print(f"{n:>9} {name:>9} {1e3 * best_of(fwd, args.repeat):>11.1f} "
                  f"{1e3 * best_of(fwd_bwd, args.repeat):>11.1f}")


if __name__ == "__main__":
    main()
