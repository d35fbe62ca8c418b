"""Flat JSON run configuration with strict schema validation."""

from __future__ import annotations

import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields

from .armodel import DiffusionSchedule, GuidanceConfig, ModelConfig, TrainConfig
from .georope import GeoRoPEConfig
from .metrics import class_ids
from .molio import ALL_TEMPLATES, DEFAULT_TEMPLATES

SEED_ENV = "IAR_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str | None = None  # directory of .xyz files; None means synthetic
    n_molecules: int = 50
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    jitter: float = 0.02
    data_seed: int = 0
    # geometry encoding
    d_type: int = 36
    n_heads: int = 1
    anchor_shape: list[int] = field(default_factory=lambda: [3, 3, 3])
    anchor_pad: float = 1.0
    rope_base: float = 100.0
    rbf_bandwidth: float = 1.5
    chol_jitter: float = 1e-8
    # model
    n_layers: int = 2
    d_ff: int = 64
    denoiser_hidden: int = 128
    n_sigma_features: int = 4
    # diffusion and guidance
    sigma_min: float = 0.01
    sigma_max: float = 5.0
    n_steps: int = 50
    sigma_data: float = 1.0
    guidance_scale: float = 1.0
    p_drop: float = 0.1
    # optimization
    seed: int = 0
    steps: int = 500
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    grad_clip: float = 1.0
    lambda_diff: float = 1.0
    lr_schedule: str = "cosine"
    # sampling
    n_samples: int = 32
    max_len: int = 32
    temperature: float = 1.0
    class_id: int | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        hints = typing.get_type_hints(type(self))
        for f in fields(self):
            _check_type(f.name, getattr(self, f.name), hints[f.name])
        if self.n_molecules < 1:
            raise ConfigError("n_molecules must be >= 1")
        unknown = set(self.templates) - set(ALL_TEMPLATES)
        if unknown or not self.templates:
            raise ConfigError(f"templates must be a non-empty subset of {ALL_TEMPLATES}")
        if len(self.anchor_shape) != 3 or min(self.anchor_shape) < 1:
            raise ConfigError("anchor_shape must hold three positive integers")
        if self.jitter < 0 or self.anchor_pad < 0:
            raise ConfigError("jitter and anchor_pad must be >= 0")
        if self.n_samples < 1 or self.max_len < 1 or self.temperature < 0:
            raise ConfigError("need n_samples >= 1, max_len >= 1 and temperature >= 0")
        if self.class_id is not None and self.class_id not in class_ids():
            raise ConfigError(f"unknown class_id {self.class_id}")
        # surface sub-config errors before any work starts
        try:
            self.geo_config(((0.0, 0.0, 0.0),))
            self.model_config()
            self.schedule()
            self.guidance()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ---- sub-configs ----------------------------------------------------

    def geo_config(self, anchors) -> GeoRoPEConfig:
        return GeoRoPEConfig(
            d_type=self.d_type,
            anchors=tuple(tuple(float(v) for v in a) for a in anchors),
            n_heads=self.n_heads,
            rope_base=self.rope_base,
            rbf_bandwidth=self.rbf_bandwidth,
            chol_jitter=self.chol_jitter,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            denoiser_hidden=self.denoiser_hidden,
            n_sigma_features=self.n_sigma_features,
        )

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.sigma_min, self.sigma_max, self.n_steps, self.sigma_data)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.guidance_scale, self.p_drop)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            grad_clip=self.grad_clip,
            lambda_diff=self.lambda_diff,
            lr_schedule=self.lr_schedule,
            seed=self.seed,
        )

    # ---- (de)serialization ---------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict, env: typing.Mapping[str, str] | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                doc["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str, env=None) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, env)

    @classmethod
    def load(cls, path, env=None) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read(), env)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _check_type(name: str, value, hint) -> None:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return
        hint = next(a for a in options if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is list:
        (item,) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        for v in value:
            _check_type(name, v, item)
        return
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
    }[hint](value)
    if not ok:
        raise ConfigError(f"{name} must be of type {hint.__name__}, got {value!r}")
