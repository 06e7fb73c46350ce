"""Run configuration: flat ``key = value`` files, CLI overrides, stable hashing."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # dataset
    n_scenes: int = 10
    n_views: int = 4
    height: int = 64
    width: int = 64
    data_seed: int = 1234
    data_dir: str = ""  # default: <out>/data
    # URAE
    patch: int = 8
    token_dim: int = 32
    latent_dim: int = 64
    use_appearance: bool = True
    s_max: float = 0.1
    m1: float = 0.05
    m2: float = 0.05
    lambda_mdms: float = 1.0
    lambda_sem: float = 0.1
    lambda_lpips: float = 0.05
    perceptual_levels: int = 3
    n_novel: int = 2
    urae_steps: int = 4000
    urae_lr: float = 2e-3
    # diffusion
    t_diff: int = 50
    schedule: str = "cosine"
    den_width: int = 128
    den_blocks: int = 4
    den_output: str = "x0"
    diff_steps: int = 1500
    diff_batch: int = 8
    diff_lr: float = 1e-3
    tau: float = 0.9
    temperature: float = 0.07
    lambda_cvc: float = 0.2
    text_drop: float = 0.5
    drop_cond_tokens: bool = False
    # MDF
    t1: int = 10
    t2: int = 20
    mdf_steps: int = 300
    mdf_lr: float = 5e-4
    mdf_bank_draws: int = 4
    # sampling / evaluation
    scene_id: str = ""  # empty: every scene of `split`
    cond_view: int = 0
    target_views: str = "1,2,3"
    split: str = "test"
    eval_source: str = "samples"  # or "gt"
    # sweep: "key=v1,v2;key2=v3" (empty: baseline only)
    sweep_grid: str = ""
    sweep_steps: int = 0  # 0 keeps the configured step counts
    # drift lab
    drift_mode: str = "bound"
    drift_trials: int = 100
    drift_probes: int = 4
    drift_radius: float = 1e-2
    drift_offset: float = 0.05
    drift_rhos: str = "0,0.05,0.1,0.2,0.3,0.4"
    xo_steps: int = 2000
    xo_latent_dim: int = 256

    def validate(self) -> "RunConfig":
        checks = [
            (self.n_scenes >= 1, "n_scenes must be >= 1"),
            (self.n_views >= 2, "n_views must be >= 2"),
            (self.height % self.patch == 0 and self.width % self.patch == 0,
             "image size must be divisible by patch"),
            (0 <= self.m1 < 1 and 0 <= self.m2 < 1, "margins must lie in [0, 1)"),
            (min(self.lambda_mdms, self.lambda_sem, self.lambda_lpips, self.lambda_cvc) >= 0,
             "loss weights must be nonnegative"),
            (0 < self.tau <= 1, "tau must lie in (0, 1]"),
            (self.temperature > 0, "temperature must be positive"),
            (self.t_diff >= 2, "t_diff must be >= 2"),
            (1 <= self.t1 <= self.t2 <= self.t_diff, "need 1 <= t1 <= t2 <= t_diff"),
            (self.schedule in ("cosine", "linear-sigma"), "unknown schedule"),
            (self.den_output in ("x0", "v"), "den_output must be x0 or v"),
            (0 <= self.text_drop <= 1, "text_drop must lie in [0, 1]"),
            (1 <= self.n_novel <= self.n_views, "n_novel must lie in [1, n_views]"),
            (self.drift_mode in ("bound", "amplification", "xo_vs_v"), "unknown drift_mode"),
            (self.split in ("train", "test", "all"), "split must be train, test or all"),
            (self.eval_source in ("samples", "gt"), "eval_source must be samples or gt"),
            (0 <= self.cond_view < self.n_views, "cond_view out of range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    # -- text form -------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self, keys=None) -> str:
        names = keys if keys is not None else [f.name for f in fields(self)]
        blob = "".join(f"{k}={_format(getattr(self, k))}\n" for k in names)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, raw)
    return dataclasses.replace(base or RunConfig(), **values).validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file < explicit overrides."""
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_text(text, cfg)
    if overrides:
        cfg = dataclasses.replace(cfg, **{k: coerce(k, str(v)) if isinstance(v, str) else v
                                          for k, v in overrides.items()})
    return cfg.validate()


# keys that determine each stage's artifacts (upstream keys are included)
DATA_KEYS = ("n_scenes", "n_views", "height", "width", "data_seed")
URAE_KEYS = DATA_KEYS + ("seed", "patch", "token_dim", "latent_dim", "use_appearance", "s_max",
                         "m1", "m2", "lambda_mdms", "lambda_sem", "lambda_lpips",
                         "perceptual_levels", "n_novel", "urae_steps", "urae_lr")
DIFF_KEYS = URAE_KEYS + ("t_diff", "schedule", "den_width", "den_blocks", "den_output",
                         "diff_steps", "diff_batch", "diff_lr", "tau", "temperature",
                         "lambda_cvc", "text_drop", "drop_cond_tokens")
MDF_KEYS = DIFF_KEYS + ("t1", "t2", "mdf_steps", "mdf_lr", "mdf_bank_draws")
STAGE_KEYS = {"urae": URAE_KEYS, "diffusion": DIFF_KEYS, "mdf": MDF_KEYS}


def parse_grid(spec: str) -> list[tuple[str, list]]:
    """``"m=0,0.05;tau=0.8,0.9"`` -> [("m", [...]), ("tau", [...])]."""
    grid = []
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise ConfigError(f"bad sweep axis {part!r}")
        key, vals = (s.strip() for s in part.split("=", 1))
        targets = SWEEP_ALIASES.get(key, (key,))
        for t in targets:
            if t not in FIELD_TYPES:
                raise ConfigError(f"unknown sweep key {key!r}")
        values = [coerce(targets[0], v) for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"sweep axis {key!r} has no values")
        grid.append((key, values))
    return grid


# "m" sets both margins, as in the shared-margin ablation
SWEEP_ALIASES = {"m": ("m1", "m2")}
