"""Conditional latent diffusion: VP schedule, x0/v conversion, CVC loss, DDIM sampling."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .camera import CameraParams
from .numerics import RngStream, ShapeError, cosine_matrix
from .urae import TrainingError, flatten_latent, linear_lr

COSINE_OFFSET = 0.008


class SingularStepError(ValueError):
    pass


class SamplingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"t={step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class DiffusionSchedule:
    """``alphas[t]``, ``sigmas[t]`` for t = 0..steps; t = 0 is the clean endpoint."""

    steps: int
    alphas: np.ndarray
    sigmas: np.ndarray
    kind: str = "cosine"

    def alpha(self, t):
        return self.alphas[t]

    def sigma(self, t):
        return self.sigmas[t]

    def check_step(self, t):
        tt = np.asarray(t)
        if np.any(tt < 1) or np.any(tt > self.steps):
            raise ValueError(f"step {t} outside [1, {self.steps}]")


def make_schedule(steps: int = 50, kind: str = "cosine") -> DiffusionSchedule:
    if steps < 2:
        raise ValueError("a schedule needs at least 2 steps")
    t = np.arange(steps + 1, dtype=np.float64) / steps
    if kind == "cosine":
        f = np.cos(0.5 * np.pi * (t + COSINE_OFFSET) / (1 + COSINE_OFFSET))
        alphas = np.clip(f / f[0], 0.0, 1.0)
        alphas[-1] = 0.0 if alphas[-1] < 1e-12 else alphas[-1]
        sigmas = np.sqrt(1.0 - alphas**2)
    elif kind == "linear-sigma":
        sigmas = t.copy()
        alphas = np.sqrt(1.0 - sigmas**2)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas.setflags(write=False)
    sigmas.setflags(write=False)
    return DiffusionSchedule(steps, alphas, sigmas, kind)


def _coef(values: np.ndarray, t, like: torch.Tensor):
    """Schedule entries at ``t`` (int or (B,) tensor) broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        c = torch.as_tensor(np.array(values), dtype=like.dtype)[t.long()]
        return c.reshape(-1, *([1] * (like.dim() - 1)))
    return float(values[int(t)])


@dataclass
class NoisySample:
    x_t: torch.Tensor
    t: object
    eps: torch.Tensor


def forward_noise(x0, eps, t, sched: DiffusionSchedule) -> NoisySample:
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeError(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    sched.check_step(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t)
    return NoisySample(_coef(sched.alphas, t, x0) * x0 + _coef(sched.sigmas, t, x0) * eps, t, eps)


def _sigma_checked(sched, t, like):
    s = _coef(sched.sigmas, t, like)
    if (s == 0) if isinstance(s, float) else bool((s == 0).any()):
        raise SingularStepError(f"sigma is zero at t={t}")
    return s


def x0_to_v(x0_hat, x_t, t, sched: DiffusionSchedule):
    s = _sigma_checked(sched, t, x_t)
    return (_coef(sched.alphas, t, x_t) * x_t - x0_hat) / s


def v_to_x0(v, x_t, t, sched: DiffusionSchedule):
    return _coef(sched.alphas, t, x_t) * x_t - _coef(sched.sigmas, t, x_t) * v


def v_target(x0, eps, t, sched: DiffusionSchedule):
    return _coef(sched.alphas, t, x0) * eps - _coef(sched.sigmas, t, x0) * x0


def loss_v(x0_hat, x_t, x0, eps, t, sched: DiffusionSchedule):
    """Mean squared error in velocity space of an x0 prediction."""
    return ((x0_to_v(x0_hat, x_t, t, sched) - v_target(x0, eps, t, sched)) ** 2).mean()


# ---------------------------------------------------------------------------
# cross-view correspondence

@dataclass
class CvcConfig:
    tau: float = 0.9
    temperature: float = 0.07
    lambda_cvc: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda_cvc < 0:
            raise ValueError("lambda_cvc must be nonnegative")


@dataclass
class CorrespondenceSet:
    index: torch.Tensor       # (..., Np) best conditioning index per target token
    kept: torch.Tensor        # (..., Np) bool
    confidence: torch.Tensor  # (..., Np) max cosine

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())


def cvc_correspondence(x0_tgt, c0_cond, cfg: CvcConfig | None = None) -> CorrespondenceSet:
    """Nearest conditioning token per target token, thresholded at ``tau``.

    Computed from ground-truth latents; ties resolve to the lowest index.
    """
    cfg = cfg or CvcConfig()
    if x0_tgt.shape[-1] != c0_cond.shape[-1] or x0_tgt.dim() != c0_cond.dim() \
            or x0_tgt.shape[:-2] != c0_cond.shape[:-2]:
        raise ShapeError(f"incompatible token sets {tuple(x0_tgt.shape)} / {tuple(c0_cond.shape)}")
    with torch.no_grad():
        sim = cosine_matrix(x0_tgt, c0_cond)
        conf = sim.max(dim=-1).values
        ar = torch.arange(sim.shape[-1]).expand(sim.shape)
        index = torch.where(sim == conf.unsqueeze(-1), ar, sim.shape[-1]).min(dim=-1).values
    return CorrespondenceSet(index, conf >= cfg.tau, conf)


def loss_cvc(x0_hat, c0_cond, matches: CorrespondenceSet, cfg: CvcConfig | None = None):
    """Mean over kept tokens of the cross-entropy at the matched index; 0 if none kept."""
    cfg = cfg or CvcConfig()
    nq = c0_cond.shape[-2]
    if matches.index.numel() and (int(matches.index.min()) < 0 or int(matches.index.max()) >= nq):
        raise IndexError("correspondence index out of range")
    kept = matches.kept
    if not bool(kept.any()):
        return (x0_hat * 0).sum()
    logits = cosine_matrix(x0_hat, c0_cond) / cfg.temperature
    logp = F.log_softmax(logits, dim=-1)
    ce = -logp.gather(-1, matches.index.unsqueeze(-1)).squeeze(-1)
    return ce[kept].mean()


def loss_diff(x0_hat, x_t, x0, eps, t, sched, c0_cond, cfg: CvcConfig | None = None,
              matches: CorrespondenceSet | None = None):
    cfg = cfg or CvcConfig()
    lv = loss_v(x0_hat, x_t, x0, eps, t, sched)
    if cfg.lambda_cvc == 0:
        return lv
    matches = matches if matches is not None else cvc_correspondence(x0, c0_cond, cfg)
    return lv + cfg.lambda_cvc * loss_cvc(x0_hat, c0_cond, matches, cfg)


# ---------------------------------------------------------------------------
# denoiser

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class DenoiserConfig:
    latent_dim: int = 64
    n_tokens: int = 64
    width: int = 128
    blocks: int = 4
    heads: int = 4
    output: str = "x0"            # network output: "x0" or "v"
    drop_cond_tokens: bool = False  # extension: dropping also nulls the conditioning tokens


class _DenoiserBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.n1, self.n2, self.n3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, ctx):
        h = self.n1(x)
        x = x + self.self_attn(h, h, h, need_weights=False)[0]
        x = x + self.cross_attn(self.n2(x), ctx, ctx, need_weights=False)[0]
        return x + self.mlp(self.n3(x))


class Denoiser(nn.Module):
    """Transformer over target tokens with cross-attention to the conditioning context."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        if cfg.output not in ("x0", "v"):
            raise ValueError("output must be 'x0' or 'v'")
        self.cfg = cfg
        d = cfg.width
        self.inp = nn.Linear(cfg.latent_dim, d)
        self.cond_inp = nn.Linear(cfg.latent_dim, d)
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.n_tokens, d))
        self.cam = nn.Linear(16, d)
        self.time = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.text_token = nn.Parameter(0.02 * torch.randn(d))
        self.null_text = nn.Parameter(0.02 * torch.randn(d))
        self.null_cond = nn.Parameter(0.02 * torch.randn(cfg.n_tokens, d))
        self.blocks = nn.ModuleList(_DenoiserBlock(d, cfg.heads) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.latent_dim)

    def forward(self, x_t, t, cond_tokens, cond_code, tgt_code, dropped):
        """Raw network output for batched inputs.

        x_t, cond_tokens: (B, Np, C); t: (B,) long; *_code: (B, 16); dropped: (B,) bool.
        """
        dtype = x_t.dtype
        temb = self.time(timestep_embedding(t, self.cfg.width).to(dtype))
        x = self.inp(x_t) + self.pos + (temb + self.cam(tgt_code))[:, None]
        c = self.cond_inp(cond_tokens) + self.pos
        drop = dropped.reshape(-1, 1, 1).to(dtype)
        if self.cfg.drop_cond_tokens:
            c = (1 - drop) * c + drop * self.null_cond
        c = c + self.cam(cond_code)[:, None]
        text = (1 - drop[:, :, 0]) * self.text_token + drop[:, :, 0] * self.null_text
        ctx = torch.cat([c, text[:, None]], dim=1)
        for blk in self.blocks:
            x = blk(x, ctx)
        return self.out(self.norm(x))


@dataclass
class Conditioning:
    cond_tokens: torch.Tensor  # (Np, C) clean single-view latent
    cond_cam: CameraParams
    tgt_cam: CameraParams
    dropped: bool = False


def _codes(cams, dtype):
    return torch.as_tensor(np.stack([c.encoding() for c in cams]), dtype=dtype)


def denoise_batch(model: Denoiser, x_t, t, cond_tokens, cond_codes, tgt_codes, dropped,
                  sched: DiffusionSchedule):
    out = model(x_t, t, cond_tokens, cond_codes, tgt_codes, dropped)
    return out if model.cfg.output == "x0" else v_to_x0(out, x_t, t, sched)


def denoise(x_t, t: int, cond: Conditioning, model: Denoiser, sched: DiffusionSchedule):
    """x0 prediction for one (Np, C) state."""
    if tuple(x_t.shape) != (model.cfg.n_tokens, model.cfg.latent_dim):
        raise ShapeError(f"state {tuple(x_t.shape)} does not match the denoiser")
    dtype = model.inp.weight.dtype
    tt = torch.full((1,), int(t), dtype=torch.long)
    out = denoise_batch(model, x_t[None].to(dtype), tt, cond.cond_tokens[None].to(dtype),
                        _codes([cond.cond_cam], dtype), _codes([cond.tgt_cam], dtype),
                        torch.tensor([cond.dropped]), sched)
    return out[0].to(x_t.dtype)


# ---------------------------------------------------------------------------
# sampling

@dataclass
class SampleResult:
    x0: torch.Tensor
    trajectory: list          # [x_T, ..., x_0]
    predictions: list         # x0_hat at t = T..1
    trace: list = field(default_factory=list)


def ddim_step(x_t, x0_hat, t: int, sched: DiffusionSchedule):
    a_t, s_t = float(sched.alphas[t]), float(sched.sigmas[t])
    a_p, s_p = float(sched.alphas[t - 1]), float(sched.sigmas[t - 1])
    if s_t == 0:
        raise SingularStepError(f"sigma is zero at t={t}")
    return a_p * x0_hat + s_p * (x_t - a_t * x0_hat) / s_t


def sample(predict: Callable, sched: DiffusionSchedule, shape, rng: RngStream | None = None,
           x_T: torch.Tensor | None = None, stop_at: int = 0, dtype=torch.float64) -> SampleResult:
    """Deterministic DDIM rollout.

    ``predict(x_t, t)`` returns the x0 estimate; use :func:`model_predictor`
    to wrap a trained denoiser. The rollout starts from ``x_T`` or from a
    standard normal draw of ``rng`` and stops after producing ``x_{stop_at}``.
    """
    if x_T is None:
        if rng is None:
            raise ValueError("sample needs an rng or an explicit x_T")
        x_T = torch.as_tensor(rng.normal(tuple(shape)), dtype=dtype)
    x = x_T
    traj, preds, trace = [x], [], []
    for t in range(sched.steps, stop_at, -1):
        x0_hat = predict(x, t)
        if not torch.isfinite(x0_hat).all():
            raise SamplingError(t, "non-finite prediction")
        x = ddim_step(x, x0_hat, t, sched)
        if not torch.isfinite(x).all():
            raise SamplingError(t, "non-finite state")
        trace.append({"t": t, "alpha": float(sched.alphas[t]), "sigma": float(sched.sigmas[t]),
                      "latent_norm": float(traj[-1].norm()), "pred_norm": float(x0_hat.norm())})
        traj.append(x)
        preds.append(x0_hat)
    return SampleResult(x, traj, preds, trace)


def model_predictor(model: Denoiser, cond: Conditioning, sched: DiffusionSchedule):
    def predict(x_t, t):
        with torch.no_grad():
            return denoise(x_t, t, cond, model, sched)
    return predict


TRACE_COLUMNS = ("t", "alpha", "sigma", "latent_norm", "pred_norm")


def write_trace(path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(float(row[k])) if k != "t" else int(row[k]) for k in TRACE_COLUMNS})


# ---------------------------------------------------------------------------
# training

@dataclass
class DiffusionTrainConfig:
    steps: int = 1500
    batch: int = 8
    lr: float = 1e-3
    lr_final: float = 1e-4
    text_drop: float = 0.5
    cvc: CvcConfig = field(default_factory=CvcConfig)


@dataclass
class LatentScene:
    """Clean latents of one scene: joint multi-view latent and single-view encodings."""

    joint: torch.Tensor    # (N, Np, C)
    single: torch.Tensor   # (N, Np, C)
    cameras: list


def encode_scenes(urae, records) -> list[LatentScene]:
    out = []
    dtype = urae.patchifier.weight.dtype
    with torch.no_grad():
        for r in records:
            images = torch.as_tensor(np.asarray(r.images), dtype=dtype)
            _, _, v = urae.encode(images, r.cameras)
            singles = [urae.encode(images[k:k + 1], r.cameras[k:k + 1])[2]
                       for k in range(images.shape[0])]
            out.append(LatentScene(flatten_latent(v), flatten_latent(torch.cat(singles)),
                                   list(r.cameras)))
    return out


@dataclass
class LatentNormalizer:
    """Per-channel standardization of URAE latents before diffusion.

    Raw latents share a large common direction, which makes token cosines
    nearly uninformative; diffusion and CVC run in the standardized space.
    """

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, scenes: Sequence[LatentScene]) -> "LatentNormalizer":
        flat = torch.cat([s.joint.reshape(-1, s.joint.shape[-1]) for s in scenes]).double()
        return cls(flat.mean(0), flat.std(0).clamp_min(1e-6))

    @classmethod
    def identity(cls, dim: int) -> "LatentNormalizer":
        return cls(torch.zeros(dim, dtype=torch.float64), torch.ones(dim, dtype=torch.float64))

    def normalize(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def denormalize(self, x):
        return x * self.std.to(x.dtype) + self.mean.to(x.dtype)

    def apply(self, scene: LatentScene) -> LatentScene:
        return LatentScene(self.normalize(scene.joint), self.normalize(scene.single), scene.cameras)

    def tensors(self) -> dict:
        return {"latent_norm.mean": self.mean.numpy(), "latent_norm.std": self.std.numpy()}

    @classmethod
    def from_tensors(cls, tensors: dict) -> "LatentNormalizer":
        return cls(torch.as_tensor(tensors["latent_norm.mean"], dtype=torch.float64),
                   torch.as_tensor(tensors["latent_norm.std"], dtype=torch.float64))


def _draw_pairs(rng: RngStream, scenes, batch):
    g = rng.generator()
    items = []
    for _ in range(batch):
        s = int(g.integers(len(scenes)))
        n = scenes[s].joint.shape[0]
        k = int(g.integers(n))
        j = int(g.integers(n - 1)) if n > 1 else 0
        j = j + (j >= k) if n > 1 else 0
        items.append((s, k, j))
    return items


def train_diffusion(model: Denoiser, scenes: Sequence[LatentScene], sched: DiffusionSchedule,
                    cfg: DiffusionTrainConfig, rng: RngStream,
                    log: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimize loss_diff on (conditioning view, target view) pairs of clean latents."""
    if not scenes:
        raise ValueError("train_diffusion needs at least one scene")
    dtype = model.inp.weight.dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    codes = [_codes(s.cameras, dtype) for s in scenes]
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        linear_lr(opt, cfg.lr, cfg.lr_final, step, cfg.steps)
        items = _draw_pairs(rng, scenes, cfg.batch)
        x0 = torch.stack([scenes[s].joint[j] for s, _, j in items]).to(dtype)
        c0 = torch.stack([scenes[s].single[k] for s, k, _ in items]).to(dtype)
        cc = torch.stack([codes[s][k] for s, k, _ in items])
        tc = torch.stack([codes[s][j] for s, _, j in items])
        g = rng.generator()
        t = torch.as_tensor(g.integers(1, sched.steps + 1, cfg.batch), dtype=torch.long)
        eps = torch.as_tensor(g.standard_normal(x0.shape), dtype=dtype)
        dropped = torch.as_tensor(g.random(cfg.batch) < cfg.text_drop)
        x_t = forward_noise(x0, eps, t, sched).x_t
        x0_hat = denoise_batch(model, x_t, t, c0, cc, tc, dropped, sched)
        lv = loss_v(x0_hat, x_t, x0, eps, t, sched)
        matches = cvc_correspondence(x0, c0, cfg.cvc)
        lc = loss_cvc(x0_hat, c0, matches, cfg.cvc)
        total = lv + cfg.cvc.lambda_cvc * lc
        if not torch.isfinite(total):
            raise TrainingError(step, f"non-finite diffusion loss {total.item()}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        row = {"step": step, "loss": total.item(), "loss_v": lv.item(), "loss_cvc": lc.item(),
               "kept": matches.n_kept, "time": time.perf_counter() - t0}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def correspondence_retention(model: Denoiser, scenes: Sequence[LatentScene],
                             sched: DiffusionSchedule, cfg: CvcConfig, rng: RngStream,
                             samples: int = 1) -> float:
    """Fraction of kept ground-truth matches whose argmax survives in sampled latents."""
    hits = total = 0
    for scene in scenes:
        n = scene.joint.shape[0]
        for k in range(n):
            for j in range(n):
                if j == k:
                    continue
                matches = cvc_correspondence(scene.joint[j], scene.single[k], cfg)
                if matches.n_kept == 0:
                    continue
                cond = Conditioning(scene.single[k], scene.cameras[k], scene.cameras[j])
                for _ in range(samples):
                    res = sample(model_predictor(model, cond, sched), sched,
                                 scene.joint[j].shape, rng, dtype=scene.joint.dtype)
                    got = cosine_matrix(res.x0, scene.single[k]).argmax(dim=-1)
                    hits += int((got == matches.index)[matches.kept].sum())
                    total += matches.n_kept
    return hits / total if total else float("nan")
