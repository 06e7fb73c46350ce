"""Command-line driver: gen-data, train, sample, eval, sweep, gradcheck, driftlab.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import STAGE_KEYS, ConfigError, RunConfig, SWEEP_ALIASES, load_config, parse_grid
from .numerics import EvaluationError, RngStream, load_named_tensors, save_named_tensors, \
    save_tensor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
REVISION = f"unigen3d-{__version__}"

LOG_COLUMNS = {
    "urae": ("step", "loss", "render", "sem"),
    "diffusion": ("step", "loss", "loss_v", "loss_cvc", "kept"),
    "mdf": ("step", "loss", "t", "alpha"),
}
EVAL_COLUMNS = ("scene", "psnr", "ssim", "pyramid_perceptual", "baseline_psnr")
GRADCHECK_COLUMNS = ("op", "max_rel_error", "tol", "n_probes", "passed")


# ---------------------------------------------------------------------------
# helpers

class Run:
    """Resolved paths and config for one invocation."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        data = Path(cfg.data_dir) if cfg.data_dir else Path("data")
        self.data = data if data.is_absolute() else out / data

    def stage_dir(self, stage: str) -> Path:
        return self.out / f"{stage}-{self.cfg.hash(STAGE_KEYS[stage])}"

    def weights(self, stage: str) -> Path:
        return self.stage_dir(stage) / "weights.ulw"

    def require(self, stage: str) -> Path:
        path = self.weights(stage)
        if not path.exists():
            raise ConfigError(f"missing prerequisite weights {path} (run `train --stage {stage}` "
                              f"with the same configuration first)")
        return path

    def rng(self, index: int) -> RngStream:
        return RngStream(self.cfg.seed).split(index)


class _Staged:
    """Directory written under a temp name and renamed into place on success."""

    def __init__(self, final: Path):
        self.final = final

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.tmp-", dir=self.final.parent))
        return self.tmp

    def __exit__(self, kind, exc, tb):
        if kind is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_runlog(directory: Path, cfg: RunConfig, stage: str) -> None:
    head = (f"# stage = {stage}\n# config_hash = {cfg.hash()}\n"
            f"# seed = {cfg.seed}\n# revision = {REVISION}\n")
    (directory / "run.txt").write_text(head + cfg.to_text())


def _records(run: Run, split: str):
    from .synthdata import load_record, read_manifest
    if not (run.data / "manifest.txt").exists():
        raise ConfigError(f"no dataset at {run.data} (run gen-data first)")
    manifest = read_manifest(run.data)
    ids = manifest.ids(split)
    return ids, [load_record(run.data, sid) for sid in ids]


def _urae_config(cfg: RunConfig):
    from .urae import UraeConfig
    return UraeConfig(patch=cfg.patch, token_dim=cfg.token_dim, latent_dim=cfg.latent_dim,
                      height=cfg.height, width=cfg.width, use_appearance=cfg.use_appearance,
                      s_max=cfg.s_max)


def _denoiser_config(cfg: RunConfig, latent_dim=None, output=None):
    from .diffusion import DenoiserConfig
    h, w = cfg.height // cfg.patch, cfg.width // cfg.patch
    return DenoiserConfig(latent_dim=latent_dim or cfg.latent_dim, n_tokens=h * w,
                          width=cfg.den_width, blocks=cfg.den_blocks,
                          output=output or cfg.den_output, drop_cond_tokens=cfg.drop_cond_tokens)


def _cvc(cfg: RunConfig):
    from .diffusion import CvcConfig
    return CvcConfig(tau=cfg.tau, temperature=cfg.temperature, lambda_cvc=cfg.lambda_cvc)


def _schedule(cfg: RunConfig):
    from .diffusion import make_schedule
    return make_schedule(cfg.t_diff, cfg.schedule)


def _load_urae(run: Run, stage: str = "urae"):
    from .urae import URAE, load_model
    return load_model(run.require(stage), URAE(_urae_config(run.cfg)))


def _load_denoiser(run: Run):
    from .diffusion import Denoiser, LatentNormalizer
    tensors = load_named_tensors(run.require("diffusion"))
    model = Denoiser(_denoiser_config(run.cfg))
    state = model.state_dict()
    model.load_state_dict({k: torch.as_tensor(tensors[k]).to(state[k].dtype) for k in state})
    return model, LatentNormalizer.from_tensors(tensors)


# ---------------------------------------------------------------------------
# pipeline stages (importable for tests and the acceptance harness)

def gen_data(run: Run):
    from .synthdata import make_dataset
    cfg = run.cfg
    return make_dataset(cfg.n_scenes, cfg.n_views, cfg.height, cfg.width, cfg.data_seed, run.data)


def train_stage(run: Run, stage: str) -> Path:
    cfg = run.cfg
    if stage == "urae":
        from .splat import RenderLossConfig
        from .urae import URAE, SemDistillConfig, UraeTrainConfig, save_model, train_urae
        _, records = _records(run, "train")
        rng = run.rng(1)
        torch.manual_seed(rng.torch_seed())
        model = URAE(_urae_config(cfg))
        tcfg = UraeTrainConfig(
            steps=cfg.urae_steps, lr=cfg.urae_lr, lr_final=cfg.urae_lr / 10, n_novel=cfg.n_novel,
            sem=SemDistillConfig(cfg.m1, cfg.m2, cfg.lambda_mdms, cfg.lambda_sem),
            render=RenderLossConfig(cfg.lambda_lpips, cfg.perceptual_levels))
        rows = train_urae(records, model, tcfg, rng)
        save = lambda d: save_model(d / "weights.ulw", model)
    elif stage == "diffusion":
        from .diffusion import (Denoiser, DiffusionTrainConfig, LatentNormalizer, encode_scenes,
                                train_diffusion)
        urae = _load_urae(run)
        _, records = _records(run, "train")
        scenes = encode_scenes(urae, records)
        norm = LatentNormalizer.fit(scenes)
        scenes = [norm.apply(s) for s in scenes]
        rng = run.rng(2)
        torch.manual_seed(rng.torch_seed())
        model = Denoiser(_denoiser_config(cfg))
        tcfg = DiffusionTrainConfig(steps=cfg.diff_steps, batch=cfg.diff_batch, lr=cfg.diff_lr,
                                    lr_final=cfg.diff_lr / 10, text_drop=cfg.text_drop,
                                    cvc=_cvc(cfg))
        rows = train_diffusion(model, scenes, _schedule(cfg), tcfg, rng)

        def save(d):
            tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
            tensors.update(norm.tensors())
            save_named_tensors(d / "weights.ulw", tensors)
    elif stage == "mdf":
        from .diffusion import encode_scenes
        from .mdf import MdfConfig, train_mdf
        from .splat import RenderLossConfig
        from .urae import save_model
        urae = _load_urae(run)
        denoiser, norm = _load_denoiser(run)
        _, records = _records(run, "train")
        scenes = [norm.apply(s) for s in encode_scenes(urae, records)]
        mcfg = MdfConfig(t1=cfg.t1, t2=cfg.t2, steps=cfg.mdf_steps, lr=cfg.mdf_lr,
                         lr_final=cfg.mdf_lr / 10, bank_draws=cfg.mdf_bank_draws,
                         render=RenderLossConfig(cfg.lambda_lpips, cfg.perceptual_levels))
        rows = train_mdf(urae, denoiser, scenes, records, _schedule(cfg), mcfg, run.rng(3),
                         normalizer=norm)
        save = lambda d: save_model(d / "weights.ulw", urae)
    else:
        raise ConfigError(f"unknown stage {stage!r}")

    final = run.stage_dir(stage)
    with _Staged(final) as tmp:
        save(tmp)
        write_csv(tmp / "log.csv", LOG_COLUMNS[stage], rows)
        write_runlog(tmp, cfg, stage)
    return final


def _parse_views(spec: str, n_views: int, cond: int) -> list[int]:
    try:
        views = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad target view list {spec!r}") from None
    if not views or any(not 0 <= v < n_views for v in views) or cond in views:
        raise ConfigError(f"target views {views} invalid for {n_views} views with cond {cond}")
    return views


def sample_scenes(run: Run) -> Path:
    from .diffusion import encode_scenes, sample, write_trace
    from .mdf import batched_predictor
    from .splat import rasterize, save_scene
    from .synthdata import read_manifest, load_record, write_ppm
    from .urae import unflatten_latent

    cfg = run.cfg
    urae = _load_urae(run, "mdf")
    denoiser, norm = _load_denoiser(run)
    sched = _schedule(cfg)
    manifest = read_manifest(run.data) if (run.data / "manifest.txt").exists() else None
    if manifest is None:
        raise ConfigError(f"no dataset at {run.data}")
    ids = [cfg.scene_id] if cfg.scene_id else manifest.ids(cfg.split)
    unknown = [s for s in ids if s not in manifest.ids()]
    if unknown:
        raise ConfigError(f"unknown scene ids {unknown}")
    targets = _parse_views(cfg.target_views, cfg.n_views, cfg.cond_view)
    h, w = cfg.height // cfg.patch, cfg.width // cfg.patch
    final = run.out / "samples"
    with _Staged(final) as tmp:
        for sid in ids:
            record = load_record(run.data, sid)
            scene = norm.apply(encode_scenes(urae, [record])[0])
            k = cfg.cond_view
            predict = batched_predictor(denoiser, scene, k, targets, sched)
            res = sample(predict, sched, (len(targets), *scene.joint.shape[1:]),
                         run.rng(100 + int(sid)), dtype=torch.float32)
            joint = torch.cat([scene.single[k:k + 1], res.x0])
            cams = [record.cameras[k]] + [record.cameras[j] for j in targets]
            with torch.no_grad():
                raw = norm.denormalize(joint.double()).float()
                gs = urae.decode(unflatten_latent(raw, h, w), cams)
                d = tmp / f"scene_{sid}"
                d.mkdir()
                for j, cam in zip(targets, cams[1:]):
                    write_ppm(d / f"view_{j}.ppm", rasterize(gs, cam).clamp(0, 1).numpy())
            save_tensor(d / "latent.ult", raw.numpy())
            save_scene(d / "scene.ugs", gs)
            write_trace(d / "trace.csv", res.trace)
        write_runlog(tmp, cfg, "sample")
    return final


def evaluate(run: Run) -> list[dict]:
    from .splat import perceptual_distance
    from .synthdata import load_record, metric_psnr, metric_ssim, read_ppm, read_manifest

    cfg = run.cfg
    if not (run.data / "manifest.txt").exists():
        raise ConfigError(f"no dataset at {run.data}")
    ids = read_manifest(run.data).ids(cfg.split)
    targets = _parse_views(cfg.target_views, cfg.n_views, cfg.cond_view)
    rows = []
    for sid in ids:
        record = load_record(run.data, sid)
        vals = {c: [] for c in EVAL_COLUMNS[1:]}
        for j in targets:
            gt = record.images[j]
            if cfg.eval_source == "gt":
                pred = gt
            else:
                path = run.out / "samples" / f"scene_{sid}" / f"view_{j}.ppm"
                if not path.exists():
                    raise ConfigError(f"missing sample {path} (run sample first)")
                pred = read_ppm(path)
            vals["psnr"].append(metric_psnr(pred, gt))
            vals["ssim"].append(metric_ssim(pred, gt))
            vals["pyramid_perceptual"].append(float(perceptual_distance(
                torch.as_tensor(pred, dtype=torch.float64), torch.as_tensor(gt, dtype=torch.float64))))
            vals["baseline_psnr"].append(metric_psnr(record.images[cfg.cond_view], gt))
        rows.append({"scene": sid, **{c: float(np.mean(v)) for c, v in vals.items()}})
    if rows:
        rows.append({"scene": "mean", **{c: float(np.mean([r[c] for r in rows]))
                                         for c in EVAL_COLUMNS[1:]}})
    path = run.out / f"eval_{cfg.split}.csv"
    run.out.mkdir(parents=True, exist_ok=True)
    write_csv(path, EVAL_COLUMNS, rows)
    return rows


def reconstruction_psnr(run: Run, split: str = "all", stage: str = "urae") -> float:
    """Mean PSNR of re-rendering every input view from the jointly encoded scene."""
    from .synthdata import metric_psnr
    from .urae import reconstruct
    urae = _load_urae(run, stage)
    _, records = _records(run, split)
    vals = []
    with torch.no_grad():
        for r in records:
            out = reconstruct(urae, torch.as_tensor(r.images, dtype=torch.float32), r.cameras)
            vals += [metric_psnr(o.clamp(0, 1).numpy(), r.images[k]) for k, o in enumerate(out)]
    return float(np.mean(vals))


def retention(run: Run, split: str = "test", samples: int = 2) -> float:
    from .diffusion import correspondence_retention, encode_scenes
    urae = _load_urae(run)
    denoiser, norm = _load_denoiser(run)
    _, records = _records(run, split)
    scenes = [norm.apply(s) for s in encode_scenes(urae, records)]
    return correspondence_retention(denoiser, scenes, _schedule(run.cfg), _cvc(run.cfg),
                                    run.rng(7), samples=samples)


# ---------------------------------------------------------------------------
# sweep

DIFFUSION_ONLY = set(STAGE_KEYS["diffusion"]) - set(STAGE_KEYS["urae"])


def sweep(run: Run) -> list[dict]:
    grid = parse_grid(run.cfg.sweep_grid)
    axes = [k for k, _ in grid]
    needs_diffusion = any(t in DIFFUSION_ONLY for k in axes for t in SWEEP_ALIASES.get(k, (k,)))
    if not (run.data / "manifest.txt").exists():
        gen_data(run)
    rows = []
    for values in itertools.product(*(v for _, v in grid)):
        changes = {}
        for key, value in zip(axes, values):
            for target in SWEEP_ALIASES.get(key, (key,)):
                changes[target] = value
        if run.cfg.sweep_steps:
            changes.update(urae_steps=run.cfg.sweep_steps, diff_steps=run.cfg.sweep_steps)
        cell = Run(run.cfg.replace(**changes), run.out)
        if not cell.weights("urae").exists():
            train_stage(cell, "urae")
        row = dict(zip(axes, values))
        row["recon_psnr"] = reconstruction_psnr(cell, cell.cfg.split)
        if needs_diffusion:
            if not cell.weights("diffusion").exists():
                train_stage(cell, "diffusion")
            row["retention"] = retention(cell, cell.cfg.split)
        rows.append(row)
    columns = axes + ["recon_psnr"] + (["retention"] if needs_diffusion else [])
    write_csv(run.out / "sweep.csv", columns, rows)
    return rows


# ---------------------------------------------------------------------------
# gradient-check suite

def gradcheck_suite(seed: int = 0, inject: str = "") -> list[dict]:
    from .gradcheck import run_suite
    return run_suite(RngStream(seed), inject=inject)


# ---------------------------------------------------------------------------
# drift lab

def driftlab(run: Run, fixture: str = "") -> Path:
    from .diffusion import encode_scenes
    from .mdf import amplification_sweep, batched_predictor, oracle_predictor, verify_drift_bound

    cfg = run.cfg
    sched = _schedule(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    mode = cfg.drift_mode
    if mode == "bound":
        if fixture:
            g = run.rng(5).generator()
            x0 = torch.as_tensor(g.standard_normal((cfg.n_views - 1, 16, 8)))
            if fixture == "oracle":
                predict = oracle_predictor(x0)
            else:
                offset = torch.as_tensor(g.standard_normal(x0.shape))
                offset *= cfg.drift_offset / offset.norm()
                predict = lambda x_t, t: x0 + offset
            bank = [x0]
        else:
            urae = _load_urae(run)
            denoiser, norm = _load_denoiser(run)
            _, records = _records(run, "test")
            scenes = [norm.apply(s) for s in encode_scenes(urae, records)]
            scene = scenes[0]
            targets = [j for j in range(cfg.n_views) if j != cfg.cond_view]
            predict = batched_predictor(denoiser, scene, cfg.cond_view, targets, sched)
            x0 = scene.joint[targets].double()
            bank = [s.joint[targets].double() for s in scenes]
            inner = predict
            predict = lambda x_t, t: inner(x_t, t).double()
        report = verify_drift_bound(predict, x0, sched, cfg.drift_trials, run.rng(6), bank=bank,
                                    probes=cfg.drift_probes, radius=cfg.drift_radius)
        path = run.out / "drift_bound.csv"
        report.write_csv(path)
        if report.failed:
            raise FloatingPointError(report.message)
        return path
    if mode == "amplification":
        rhos = [float(v) for v in cfg.drift_rhos.split(",") if v.strip()]
        rows = amplification_sweep(rhos, sched, run.rng(8), n_views=cfg.n_views,
                                   offset_norm=cfg.drift_offset, probes=cfg.drift_probes)
        path = run.out / "drift_amplification.csv"
        write_csv(path, ("rho", "delta0", "L_max", "kappa_max", "rho_max", "block_gap"), rows)
        return path
    from .xo_vs_v import compare_parameterizations
    rows = compare_parameterizations(run)
    path = run.out / "xo_vs_v.csv"
    write_csv(path, ("step", "loss_x0", "loss_v"), rows)
    return path


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="run seed (u64)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable; beats the file)")

    p = argparse.ArgumentParser(prog="unigen3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train one pipeline stage")
    t.add_argument("--stage", required=True, choices=("urae", "diffusion", "mdf"))
    s = sub.add_parser("sample", parents=[common], help="generate target views")
    s.add_argument("--scene-id")
    s.add_argument("--cond-view", type=int)
    s.add_argument("--target-views")
    e = sub.add_parser("eval", parents=[common], help="score samples against ground truth")
    e.add_argument("--split", choices=("train", "test", "all"))
    w = sub.add_parser("sweep", parents=[common], help="hyperparameter grid")
    w.add_argument("--grid", help='e.g. "m=0,0.05,0.1" or "tau=0.8,0.9;lambda_cvc=0.1,0.2"')
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--inject-sign-flip", default="", help=argparse.SUPPRESS)
    d = sub.add_parser("driftlab", parents=[common], help="drift-bound instrumentation")
    d.add_argument("--mode", choices=("bound", "amplification", "xo_vs_v"))
    d.add_argument("--fixture", choices=("oracle", "perturbed"), help=argparse.SUPPRESS)
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be a u64")
        out["seed"] = args.seed
    for flag, key in (("scene_id", "scene_id"), ("cond_view", "cond_view"),
                      ("target_views", "target_views"), ("split", "split"),
                      ("grid", "sweep_grid"), ("mode", "drift_mode")):
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def dispatch(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    run = Run(cfg, Path(args.out))
    torch.set_num_threads(1)
    cmd = args.command
    if cmd == "gen-data":
        manifest = gen_data(run)
        print(f"wrote {len(manifest.entries)} scenes to {run.data}")
    elif cmd == "train":
        print(f"wrote {train_stage(run, args.stage)}")
    elif cmd == "sample":
        print(f"wrote {sample_scenes(run)}")
    elif cmd == "eval":
        rows = evaluate(run)
        for r in rows:
            print(",".join(_fmt(r[c]) for c in EVAL_COLUMNS))
    elif cmd == "sweep":
        rows = sweep(run)
        print(f"{len(rows)} sweep rows written to {run.out / 'sweep.csv'}")
    elif cmd == "gradcheck":
        rows = gradcheck_suite(cfg.seed, args.inject_sign_flip)
        run.out.mkdir(parents=True, exist_ok=True)
        write_csv(run.out / "gradcheck.csv", GRADCHECK_COLUMNS, rows)
        for r in rows:
            print(f"{r['op']:<24} {r['max_rel_error']:.3e}  tol {r['tol']:.0e}  "
                  f"{'ok' if r['passed'] else 'FAIL'}")
        if not all(r["passed"] for r in rows):
            return EXIT_NUMERIC
    elif cmd == "driftlab":
        print(f"wrote {driftlab(run, args.fixture or '')}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .diffusion import SamplingError, SingularStepError
    from .urae import TrainingError
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, SamplingError, SingularStepError, EvaluationError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
