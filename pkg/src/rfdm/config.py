"""Run configuration: TOML sections with defaults for every field.

Unknown keys are rejected. ``dumps`` emits a canonical form, so a resolved
config round-trips to identical bytes and can be hashed.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .denoiser import DenoiserConfig
from .forward import Formulation
from .sample import SamplerConfig
from .schedule import NoiseSchedule
from .synthvid import GeneratorConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class ScheduleSection:
    s_min: float = 1e-3
    s_max: float = 1.0 - 1e-3
    lambda_clamp: float = 20.0


@dataclass
class GeneratorSection:
    n_clips: int = 2000
    seed: int = 0
    H: int = 64
    W: int = 64
    T: int = 15
    max_objects: int = 3
    radius_range: list = field(default_factory=lambda: [5.0, 10.0])
    max_speed: float = 1.5
    wobble_max: float = 3.0
    max_pan: float = 0.5
    bg_waves: int = 2
    bg_amp: float = 0.08
    bg_min_wavelength: float = 48.0
    tasks: list = field(default_factory=lambda: ["global_style", "local_style", "removal"])
    split_ratios: list = field(default_factory=lambda: [0.8, 0.15, 0.05])


@dataclass
class ModelSection:
    hidden: int = 64
    blocks: int = 6
    emb_dim: int = 64
    n_freqs: int = 8
    groups: int = 8
    seed: int = 0


@dataclass
class TrainSection:
    K: int = 5
    forcing: str = "diffusion"
    unroll: bool = True
    formulation: str = "residual_flow"
    cond_x_only: bool = False
    consecutive: bool = False
    drop_both_p: float = 0.05
    drop_prompt_p: float = 0.05
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 8
    grad_accum: int = 2
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500


@dataclass
class SamplerSection:
    S: int = 20
    omega_x: float = 1.5
    omega_xp: float = 7.5
    delta: int = 3
    seed: int = 0
    clip_pred: bool = True


@dataclass
class MetricsSection:
    distance: str = "pixel_mse"
    feature_seed: int = 0
    err_accu_normalizer: str = "printed"
    flow_source: str = "gt"
    split: str = "val"
    max_clips: int = 0


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # --- derived views -----------------------------------------------------

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return NoiseSchedule(s_min=s.s_min, s_max=s.s_max, lambda_clamp=s.lambda_clamp)

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(
            H=g.H, W=g.W, T=g.T, max_objects=g.max_objects, radius_range=tuple(g.radius_range),
            max_speed=g.max_speed, wobble_max=g.wobble_max, max_pan=g.max_pan, bg_waves=g.bg_waves,
            bg_amp=g.bg_amp, bg_min_wavelength=g.bg_min_wavelength, tasks=tuple(g.tasks),
            split_ratios=tuple(g.split_ratios),
        )

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        return DenoiserConfig(hidden=m.hidden, blocks=m.blocks, emb_dim=m.emb_dim, n_freqs=m.n_freqs,
                              groups=m.groups, use_prev=not self.train.cond_x_only)

    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(S=s.S, omega_x=s.omega_x, omega_xp=s.omega_xp, delta=s.delta,
                             formulation=Formulation(self.train.formulation), seed=s.seed, clip_pred=s.clip_pred)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.K": 3})``."""
        d = to_dict(self)
        for key, val in overrides.items():
            sec, _, name = key.partition(".")
            if sec not in d or name not in d[sec]:
                raise ConfigError(key, "unknown key")
            d[sec][name] = val
        return from_dict(d)


_SECTION_TYPES = {
    "schedule": ScheduleSection, "generator": GeneratorSection, "model": ModelSection,
    "train": TrainSection, "sampler": SamplerSection, "metrics": MetricsSection,
}
# fields that do not change what a training run computes
_HASH_EXCLUDE = {("train", "steps"), ("train", "checkpoint_every")}


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(key: str, default: Any, value: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected list, got {value!r}")
        if default and isinstance(default[0], float):
            return [_coerce(key, 0.0, v) for v in value]
        return list(value)
    return value


def from_dict(d: dict) -> RunConfig:
    sections = {}
    for sec, body in d.items():
        if sec not in _SECTION_TYPES:
            raise ConfigError(sec, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(sec, "section must be a table")
        typ = _SECTION_TYPES[sec]
        defaults = typ()
        known = {f.name for f in fields(typ)}
        kwargs = {}
        for k, v in body.items():
            if k not in known:
                raise ConfigError(f"{sec}.{k}", "unknown key")
            kwargs[k] = _coerce(f"{sec}.{k}", getattr(defaults, k), v)
        sections[sec] = typ(**kwargs)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    g, t, s, m = cfg.generator, cfg.train, cfg.sampler, cfg.metrics
    r = g.split_ratios
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError("generator.split_ratios", f"must be three non-negative numbers summing to 1, got {r}")
    if len(g.radius_range) != 2 or not 0 < g.radius_range[0] <= g.radius_range[1]:
        raise ConfigError("generator.radius_range", f"bad range {g.radius_range}")
    for task in g.tasks:
        if task not in ("global_style", "local_style", "removal"):
            raise ConfigError("generator.tasks", f"unknown task {task!r}")
    if not g.tasks:
        raise ConfigError("generator.tasks", "need at least one task")
    if g.T < 0 or g.H < 8 or g.W < 8:
        raise ConfigError("generator.T", "clip too small")
    if not 0 <= cfg.schedule.s_min < 0.5 < cfg.schedule.s_max <= 1.0:
        raise ConfigError("schedule.s_min", "need 0 <= s_min < 0.5 < s_max <= 1")
    if t.forcing not in ("teacher", "diffusion"):
        raise ConfigError("train.forcing", f"must be 'teacher' or 'diffusion', got {t.forcing!r}")
    if t.formulation not in [f.value for f in Formulation]:
        raise ConfigError("train.formulation", f"unknown formulation {t.formulation!r}")
    for key in ("drop_both_p", "drop_prompt_p"):
        if not 0.0 <= getattr(t, key) <= 1.0:
            raise ConfigError(f"train.{key}", "must lie in [0, 1]")
    if t.drop_both_p + t.drop_prompt_p > 1.0:
        raise ConfigError("train.drop_prompt_p", "drop_both_p + drop_prompt_p must be <= 1")
    if t.K < 0 or t.K + 1 > g.T + 1:
        raise ConfigError("train.K", f"K + 1 = {t.K + 1} exceeds clip length {g.T + 1}")
    for key in ("batch", "grad_accum", "checkpoint_every"):
        if getattr(t, key) < 1:
            raise ConfigError(f"train.{key}", "must be >= 1")
    if t.steps < 0:
        raise ConfigError("train.steps", "must be >= 0")
    if s.S < 1:
        raise ConfigError("sampler.S", "must be >= 1")
    if s.delta < 0:
        raise ConfigError("sampler.delta", "must be >= 0")
    if m.distance not in ("pixel_mse", "random_conv_features"):
        raise ConfigError("metrics.distance", f"unknown distance {m.distance!r}")
    if m.err_accu_normalizer not in ("printed", "T"):
        raise ConfigError("metrics.err_accu_normalizer", "must be 'printed' or 'T'")
    if m.flow_source not in ("gt", "block_matching"):
        raise ConfigError("metrics.flow_source", "must be 'gt' or 'block_matching'")
    if m.split not in ("train", "val", "test"):
        raise ConfigError("metrics.split", "must be train, val or test")
    if cfg.model.hidden % cfg.model.groups:
        raise ConfigError("model.groups", "hidden must be divisible by groups")


def dumps(cfg: RunConfig) -> bytes:
    return tomli_w.dumps(to_dict(cfg)).encode("utf-8")


def loads(data: bytes | str) -> RunConfig:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError("<file>", f"TOML parse error: {e}") from None
    return from_dict(raw)


def load(path) -> RunConfig:
    return loads(Path(path).read_bytes())


def config_hash(cfg: RunConfig, exclude=_HASH_EXCLUDE) -> str:
    d = to_dict(cfg)
    for sec, key in exclude:
        d[sec].pop(key, None)
    return hashlib.sha256(tomli_w.dumps(d).encode("utf-8")).hexdigest()


def training_hash(cfg: RunConfig) -> str:
    """Hash of everything that determines a training trajectory (model, data, train, schedule)."""
    d = to_dict(cfg)
    d.pop("sampler")
    d.pop("metrics")
    for sec, key in _HASH_EXCLUDE:
        d[sec].pop(key, None)
    return hashlib.sha256(tomli_w.dumps(d).encode("utf-8")).hexdigest()
