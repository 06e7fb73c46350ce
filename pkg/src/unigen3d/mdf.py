"""Manifold-drift forcing for the decoder heads, and the drift lab.

The drift lab instantiates the rollout-error recursion
``delta_{t-1} <= L_t * delta_t + eps_t`` numerically: a learned one-step
map ``F`` (DDIM update driven by some x0 predictor) is compared with the
oracle map ``F*`` (the same update driven by the ground-truth x0), and
Lipschitz constants / one-step errors are estimated as empirical maxima.
Norms are Frobenius norms of the flattened joint (all-view) state.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import (Conditioning, Denoiser, DiffusionSchedule, LatentScene, _codes,
                        ddim_step, denoise_batch, sample)
from .numerics import RngStream, ShapeError, draw_uniform
from .splat import TRAIN_T_MIN, RenderLossConfig, loss_render, rasterize
from .urae import TrainingError, linear_lr, unflatten_latent

# comparisons of quantities that are equal in exact arithmetic
FLOAT_SLACK = 1e-9


@dataclass
class MdfConfig:
    t1: int = 10
    t2: int = 20
    steps: int = 300
    lr: float = 5e-4
    lr_final: float = 5e-5
    bank_draws: int = 4
    t_min: float = TRAIN_T_MIN
    render: RenderLossConfig = field(default_factory=RenderLossConfig)

    def validate(self, t_diff: int):
        if not 1 <= self.t1 <= self.t2 <= t_diff:
            raise ValueError(f"need 1 <= T1 <= T2 <= {t_diff}, got [{self.t1}, {self.t2}]")


def drift_mix(v_hat, v_gt, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"mix ratio {alpha} outside [0, 1]")
    if tuple(v_hat.shape) != tuple(v_gt.shape):
        raise ShapeError(f"shape mismatch {tuple(v_hat.shape)} vs {tuple(v_gt.shape)}")
    return alpha * v_hat + (1.0 - alpha) * v_gt


# ---------------------------------------------------------------------------
# drifted latents

def batched_predictor(model: Denoiser, scene: LatentScene, cond_view: int, targets: Sequence[int],
                      sched: DiffusionSchedule):
    """x0 predictor over the stacked target-view state (len(targets), Np, C)."""
    dtype = model.inp.weight.dtype
    codes = _codes(scene.cameras, dtype)
    b = len(targets)
    c0 = scene.single[cond_view].to(dtype).expand(b, -1, -1)
    cc = codes[cond_view].expand(b, -1)
    tc = codes[list(targets)]
    dropped = torch.zeros(b, dtype=torch.bool)

    def predict(x_t, t):
        with torch.no_grad():
            tt = torch.full((b,), int(t), dtype=torch.long)
            return denoise_batch(model, x_t.to(dtype), tt, c0, cc, tc, dropped, sched).to(x_t.dtype)
    return predict


def sample_drifted_latent(predict: Callable, sched: DiffusionSchedule, cfg: MdfConfig,
                          rng: RngStream, shape, dtype=torch.float64):
    """Roll the sampler down to t ~ U{T1..T2}; return (x0 prediction at t, t, alpha)."""
    cfg.validate(sched.steps)
    t = int(rng.integers(cfg.t1, cfg.t2 + 1))
    alpha = draw_uniform(rng, 0.0, 1.0)
    res = sample(predict, sched, shape, rng, stop_at=t, dtype=dtype)
    return predict(res.trajectory[-1], t), t, alpha


def drifted_scene_latent(model: Denoiser, scene: LatentScene, cond_view: int,
                         sched: DiffusionSchedule, cfg: MdfConfig, rng: RngStream):
    """Joint latent (N, Np, C) with the conditioning slot clean and the rest drifted.

    Returns (v_hat, v_gt, t, alpha); the conditioning slot holds its
    single-view encoding in both.
    """
    n = scene.joint.shape[0]
    targets = [j for j in range(n) if j != cond_view]
    pred, t, alpha = sample_drifted_latent(
        batched_predictor(model, scene, cond_view, targets, sched), sched, cfg, rng,
        (len(targets), *scene.joint.shape[1:]), dtype=scene.joint.dtype)
    v_gt = scene.joint.clone()
    v_gt[cond_view] = scene.single[cond_view]
    v_hat = v_gt.clone()
    v_hat[targets] = pred
    return v_hat, v_gt, t, alpha


def mdf_objective(v_tilde, gt_images, cams, urae, render_cfg: RenderLossConfig | None = None,
                  t_min: float = 0.0):
    """Decode ``v_tilde`` (N, h, w, C) and supervise every one of the N views."""
    if v_tilde.shape[0] != len(cams) or len(gt_images) != len(cams):
        raise ShapeError(f"{v_tilde.shape[0]} latents, {len(gt_images)} images, {len(cams)} cameras")
    scene = urae.decode(v_tilde, cams)
    rendered = [rasterize(scene, cam, t_min=t_min) for cam in cams]
    return loss_render(rendered, [gt_images[k] for k in range(len(cams))], render_cfg)


def _grid(urae):
    return urae.cfg.grid


def build_drift_bank(model: Denoiser, scenes: Sequence[LatentScene], sched, cfg: MdfConfig,
                     rng: RngStream, draws: int, normalizer=None):
    """Per scene, ``draws`` drifted joint latents (frozen denoiser, so reusable).

    Entries are (v_hat, v_gt, t) in decoder (raw latent) space.
    """
    bank = []
    for s, scene in enumerate(scenes):
        items = []
        for d in range(draws):
            k = int(rng.integers(0, scene.joint.shape[0]))
            v_hat, v_gt, t, _ = drifted_scene_latent(model, scene, k, sched, cfg, rng)
            if normalizer is not None:
                v_hat, v_gt = normalizer.denormalize(v_hat), normalizer.denormalize(v_gt)
            items.append((v_hat, v_gt, t))
        bank.append(items)
    return bank


def train_mdf(urae, denoiser: Denoiser, scenes: Sequence[LatentScene], records, sched,
              cfg: MdfConfig, rng: RngStream, log: Callable[[dict], None] | None = None,
              normalizer=None):
    """Fine-tune only the decoder heads on mixtures of drifted and clean latents.

    ``scenes`` live in the diffusion space; ``normalizer`` maps them back to
    the decoder's latent space.
    """
    cfg.validate(sched.steps)
    if len(scenes) != len(records) or not scenes:
        raise ValueError("need one latent scene per record")
    for p in urae.parameters():
        p.requires_grad_(False)
    for p in urae.heads.parameters():
        p.requires_grad_(True)
    denoiser.requires_grad_(False)
    dtype = urae.heads.out.weight.dtype
    images = [torch.as_tensor(np.asarray(r.images), dtype=dtype) for r in records]
    bank = build_drift_bank(denoiser, scenes, sched, cfg, rng, cfg.bank_draws, normalizer)
    h, w = _grid(urae)
    opt = torch.optim.Adam(urae.heads.parameters(), lr=cfg.lr)
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        linear_lr(opt, cfg.lr, cfg.lr_final, step, cfg.steps)
        s = int(rng.integers(0, len(scenes)))
        v_hat, v_gt, t = bank[s][int(rng.integers(0, len(bank[s])))]
        alpha = draw_uniform(rng, 0.0, 1.0)
        v = unflatten_latent(drift_mix(v_hat, v_gt, alpha).to(dtype), h, w)
        loss = mdf_objective(v, images[s], scenes[s].cameras, urae, cfg.render, cfg.t_min)
        if not torch.isfinite(loss):
            raise TrainingError(step, f"non-finite MDF loss {loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        row = {"step": step, "loss": loss.item(), "t": t, "alpha": alpha,
               "time": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(row)
    urae.heads.requires_grad_(False)
    return rows


def render_mse(urae, latent, images, cams) -> float:
    """Mean per-view MSE of the decoded render of a flattened joint latent."""
    h, w = _grid(urae)
    dtype = urae.heads.out.weight.dtype
    with torch.no_grad():
        scene = urae.decode(unflatten_latent(latent.to(dtype), h, w), cams)
        errs = [float(((rasterize(scene, c) - torch.as_tensor(images[k], dtype=dtype)) ** 2).mean())
                for k, c in enumerate(cams)]
    return float(np.mean(errs))


def compare_decoders(pre, post, denoiser: Denoiser, scenes: Sequence[LatentScene], records,
                     sched, cfg: MdfConfig, rng: RngStream, normalizer=None) -> list[dict]:
    """Render MSE of two decoders on one drifted latent (alpha = 1) and the clean latent, per scene."""
    rows = []
    for s, (scene, rec) in enumerate(zip(scenes, records)):
        k = int(rng.integers(0, scene.joint.shape[0]))
        v_hat, v_gt, t, _ = drifted_scene_latent(denoiser, scene, k, sched, cfg, rng)
        if normalizer is not None:
            v_hat, v_gt = normalizer.denormalize(v_hat), normalizer.denormalize(v_gt)
        row = {"scene": s, "t": t}
        for name, model in (("pre", pre), ("post", post)):
            row[f"drift_{name}"] = render_mse(model, v_hat, rec.images, scene.cameras)
            row[f"clean_{name}"] = render_mse(model, v_gt, rec.images, scene.cameras)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# drift lab: estimators

def step_map(predict: Callable, t: int, sched: DiffusionSchedule):
    """One DDIM update X_t -> X_{t-1} driven by ``predict``."""
    return lambda x: ddim_step(x, predict(x, t), t, sched)


@dataclass
class LipschitzEstimate:
    L: float
    kappa: float
    rho: float
    n_pairs: int


def _norm(x) -> float:
    return float(torch.linalg.vector_norm(x.double()))


def estimate_lipschitz(fmap: Callable, base, probes: int, radius: float, rng: RngStream,
                       pairs: Sequence[tuple] = ()) -> LipschitzEstimate:
    """Empirical Lipschitz constant of ``fmap`` near ``base`` (views on axis 0).

    ``L`` is the max ratio over random pairs within ``radius`` of ``base``
    (plus any explicit ``pairs``); ``kappa``/``rho`` are the largest same-view
    and cross-view responses to perturbing a single view.
    """
    if probes < 2:
        raise ValueError("need at least 2 probes")
    g = rng.generator()
    n_views = base.shape[0]
    ratios = []

    def ratio(a, b):
        d = _norm(a - b)
        if d == 0.0:
            return None
        return _norm(fmap(a) - fmap(b)) / d

    pts = [base + torch.as_tensor(g.standard_normal(base.shape), dtype=base.dtype)
           * (0.5 * radius * g.random() / np.sqrt(base.numel())) for _ in range(probes)]
    for i in range(probes - 1):
        r = ratio(pts[i], pts[i + 1])
        if r is not None:
            ratios.append(r)
    for a, b in pairs:
        r = ratio(a, b)
        if r is not None:
            ratios.append(r)

    f0 = fmap(base)
    kappa = rho = 0.0
    for i in range(probes):
        m = i % n_views
        d = torch.zeros_like(base)
        d[m] = torch.as_tensor(g.standard_normal(base.shape[1:]), dtype=base.dtype)
        d *= radius / _norm(d)
        resp = fmap(base + d) - f0
        for n in range(n_views):
            val = _norm(resp[n]) / radius
            if n == m:
                kappa = max(kappa, val)
            else:
                rho = max(rho, val)
    return LipschitzEstimate(max(ratios) if ratios else 0.0, kappa, rho, len(ratios))


def estimate_one_step_error(learned: Callable, oracle: Callable, states: Sequence) -> float:
    if len(states) == 0:
        raise ValueError("need at least one oracle state")
    return max(_norm(learned(x) - oracle(x)) for x in states)


def drift_bound(L: Sequence[float], eps: Sequence[float], delta_T: float) -> float:
    """(prod_k L_k) delta_T + sum_t (prod_{k<t} L_k) eps_t, with L, eps ordered t = 1..T."""
    if len(L) != len(eps):
        raise ValueError(f"{len(L)} Lipschitz values but {len(eps)} errors")
    if delta_T < 0 or any(v < 0 for v in L) or any(v < 0 for v in eps):
        raise ValueError("drift bound inputs must be nonnegative")
    total, prefix = 0.0, 1.0
    for l_k, e_k in zip(L, eps):
        total += prefix * e_k
        prefix *= l_k
    return total + prefix * delta_T


def manifold_distance(x, bank: Sequence) -> float:
    """Nearest-neighbour distance from ``x`` to a bank of clean latents."""
    if len(bank) == 0:
        raise ValueError("empty latent bank")
    return min(_norm(x - b) for b in bank)


# ---------------------------------------------------------------------------
# drift lab: bound verification

REPORT_COLUMNS = ("trial", "t", "delta", "L", "eps", "kappa", "rho", "bound", "measured_d0")


@dataclass
class DriftReport:
    rows: list = field(default_factory=list)
    failed: bool = False
    message: str = ""

    def trials(self):
        return sorted({r["trial"] for r in self.rows})

    def final(self, trial: int) -> dict:
        return next(r for r in self.rows if r["trial"] == trial and r["t"] == 0)

    def holds(self, slack: float = FLOAT_SLACK) -> bool:
        return not self.failed and all(
            r["delta"] <= r["bound"] * (1 + slack) + slack for r in self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["trial"], r["t"]] + [repr(float(r[k])) for k in REPORT_COLUMNS[2:]])


def oracle_predictor(x0):
    return lambda x_t, t: x0.to(x_t.dtype).expand_as(x_t).clone()


def verify_drift_bound(predict: Callable, x0, sched: DiffusionSchedule, trials: int,
                       rng: RngStream, bank: Sequence = (), probes: int = 4,
                       radius: float = 1e-2) -> DriftReport:
    """Paired learned/oracle rollouts from shared x_T; one report row per (trial, t).

    ``L_t`` is the max of the probe estimate and the ratio on the visited
    pair (X_t, X*_t); ``eps_t`` is measured on the visited oracle state. The
    ``bound`` column unrolls the recursion from t = T down to the row's t.
    """
    report = DriftReport()
    oracle = oracle_predictor(x0)
    bank = list(bank) or [x0]
    for trial in range(trials):
        trng = rng.split(trial)
        x_T = torch.as_tensor(trng.normal(tuple(x0.shape)), dtype=x0.dtype)
        x, xs = x_T, x_T
        delta = _norm(x - xs)
        bound = delta
        report.rows.append({"trial": trial, "t": sched.steps, "delta": delta, "L": 0.0,
                            "eps": 0.0, "kappa": 0.0, "rho": 0.0, "bound": bound,
                            "measured_d0": 0.0})
        try:
            for t in range(sched.steps, 0, -1):
                f_learn = step_map(predict, t, sched)
                f_orac = step_map(oracle, t, sched)
                est = estimate_lipschitz(f_learn, xs, probes, radius, trng, pairs=[(x, xs)])
                eps = estimate_one_step_error(f_learn, f_orac, [xs])
                x, xs = f_learn(x), f_orac(xs)
                if not torch.isfinite(x).all():
                    raise FloatingPointError(f"non-finite learned state at t={t}")
                delta = _norm(x - xs)
                bound = est.L * bound + eps
                report.rows.append({"trial": trial, "t": t - 1, "delta": delta, "L": est.L,
                                    "eps": eps, "kappa": est.kappa, "rho": est.rho,
                                    "bound": bound, "measured_d0": 0.0})
        except (FloatingPointError, RuntimeError) as exc:
            report.failed, report.message = True, str(exc)
            continue
        d0 = manifold_distance(x, bank)
        for r in report.rows:
            if r["trial"] == trial:
                r["measured_d0"] = d0
    return report


# ---------------------------------------------------------------------------
# drift lab: cross-view amplification

def block_linear_denoiser(x0, eps_dir, sched: DiffusionSchedule, kappa_c: float, rho_c: float,
                          offset):
    """x0 + offset + G (X - X*_t) with G = kappa_c I + rho_c (11^T - I) across views.

    ``X*_t = alpha_t x0 + sigma_t eps_dir`` is the oracle chain started at
    ``x_T = eps_dir``; ``rho_c`` couples every view to every other.
    """
    def predict(x_t, t):
        dev = x_t - (float(sched.alphas[t]) * x0 + float(sched.sigmas[t]) * eps_dir)
        mixed = (kappa_c - rho_c) * dev + rho_c * dev.sum(dim=0, keepdim=True)
        return x0 + offset + mixed
    return predict


def amplification_sweep(rhos: Sequence[float], sched: DiffusionSchedule, rng: RngStream,
                        n_views: int = 4, tokens: int = 16, dim: int = 8, kappa_c: float = 0.1,
                        offset_norm: float = 0.05, probes: int = 4):
    """delta_0 and block estimates across coupling strengths (shared x0, x_T, offset)."""
    g = rng.generator()
    shape = (n_views, tokens, dim)
    x0 = torch.as_tensor(g.standard_normal(shape))
    x_T = torch.as_tensor(g.standard_normal(shape))
    offset = torch.as_tensor(np.abs(g.standard_normal(shape)))
    offset *= offset_norm / _norm(offset)
    rows = []
    for rho_c in rhos:
        predict = block_linear_denoiser(x0, x_T, sched, kappa_c, rho_c, offset)
        oracle = oracle_predictor(x0)
        x, xs = x_T.clone(), x_T.clone()
        worst_gap = -np.inf
        per_t = []
        for t in range(sched.steps, 0, -1):
            est = estimate_lipschitz(step_map(predict, t, sched), xs, probes, 1e-2, rng,
                                     pairs=[(x, xs)] if _norm(x - xs) > 0 else ())
            gap = est.L - (est.kappa + (n_views - 1) * est.rho)
            worst_gap = max(worst_gap, gap)
            per_t.append((t, est))
            x = step_map(predict, t, sched)(x)
            xs = step_map(oracle, t, sched)(xs)
        rows.append({"rho": float(rho_c), "delta0": _norm(x - xs),
                     "L_max": max(e.L for _, e in per_t),
                     "kappa_max": max(e.kappa for _, e in per_t),
                     "rho_max": max(e.rho for _, e in per_t),
                     "block_gap": float(worst_gap)})
    return rows


def estimate_render_lipschitz(render: Callable, base_latent, probes: int, radius: float,
                              rng: RngStream):
    """Per-view max ||f_n(X + D) - f_n(X)|| / ||D|| over random ``D`` with ||D|| <= radius."""
    if probes < 2:
        raise ValueError("need at least 2 probes")
    g = rng.generator()
    base = render(base_latent)
    k = np.zeros(len(base))
    for _ in range(probes):
        d = torch.as_tensor(g.standard_normal(tuple(base_latent.shape)), dtype=base_latent.dtype)
        d *= radius * (0.5 + 0.5 * g.random()) / _norm(d)
        out = render(base_latent + d)
        for n, (a, b) in enumerate(zip(out, base)):
            k[n] = max(k[n], _norm(a - b) / _norm(d))
    return k, float(k.sum())
