"""Flat ``key = value`` run configuration with layered precedence.

Resolution order, later wins: built-in defaults, the ``DIFFKIT_SEED``
environment variable (seed only), the config file, command-line flags.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Optional

from .diffusion import TrainConfig
from .errors import ConfigError
from .latent import VAEConfig
from .sampler import SamplerConfig
from .schedule import ScheduleConfig
from .unet import UNetConfig

SEED_ENV = "DIFFKIT_SEED"

ENUMS = {
    "beta_schedule": ("cosine", "linear"),
    "variance_type": ("fixed_small",),
    "predictor_type": ("epsilon",),
    "sampler": ("ddim", "ddpm"),
    "normalization": ("dataset_standardize", "unit_interval_symmetric"),
}


@dataclass
class RunConfig:
    # hyperparameter table names
    seed: int = 42
    image_size: int = 32
    batch_size: int = 128
    num_workers: int = 4
    num_classes: int = 10
    num_epochs: int = 480
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    num_train_timesteps: int = 1000
    num_inference_steps: int = 250
    beta_start: float = 0.0002
    beta_end: float = 0.02
    beta_schedule: str = "linear"
    variance_type: str = "fixed_small"
    predictor_type: str = "epsilon"
    unet_in_size: int = 32
    unet_in_ch: int = 3
    unet_ch: int = 64
    unet_num_res_blocks: int = 3
    unet_ch_mult: list[int] = field(default_factory=lambda: [1, 2, 4, 4])
    unet_attn: list[int] = field(default_factory=lambda: [2, 3])
    unet_dropout: float = 0.1
    # sampling, guidance, latent diffusion
    sampler: str = "ddim"
    eta: float = 0.0
    guidance_weight: float = 1.0
    label_dropout_prob: float = 0.1
    class_conditional: bool = False
    latent: bool = False
    latent_channels: int = 4
    latent_factor: int = 4
    vae_ch: int = 32
    beta_kl: float = 1e-3
    # plumbing
    stability_epsilon: float = 1e-8
    flip_prob: float = 0.5
    normalization: str = "unit_interval_symmetric"
    log_every: int = 1
    max_steps: int = 0

    def validate(self) -> "RunConfig":
        for key, allowed in ENUMS.items():
            value = getattr(self, key)
            if value not in allowed:
                raise ConfigError(f"{key}: {value!r} is not one of {sorted(allowed)}")
        positive = ("image_size", "batch_size", "num_workers", "num_epochs", "num_train_timesteps",
                    "num_inference_steps", "unet_in_size", "unet_in_ch", "unet_ch",
                    "unet_num_res_blocks", "latent_channels", "latent_factor", "vae_ch", "log_every")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1, got {getattr(self, key)}")
        if self.max_steps < 0:
            raise ConfigError("max_steps: must be >= 0 (0 means no limit)")
        if self.num_inference_steps > self.num_train_timesteps:
            raise ConfigError(
                f"num_inference_steps: {self.num_inference_steps} exceeds "
                f"num_train_timesteps {self.num_train_timesteps}"
            )
        if not 0.0 <= self.label_dropout_prob < 1.0:
            raise ConfigError(f"label_dropout_prob: must lie in [0, 1), got {self.label_dropout_prob}")
        if self.eta < 0:
            raise ConfigError(f"eta: must be >= 0, got {self.eta}")
        if self.class_conditional and self.num_classes < 2:
            raise ConfigError("num_classes: a class-conditional model needs >= 2 (last one is the null class)")
        expected = self.image_size // self.latent_factor if self.latent else self.image_size
        if self.latent and self.image_size % self.latent_factor:
            raise ConfigError(
                f"image_size: {self.image_size} not divisible by latent_factor {self.latent_factor}"
            )
        if self.unet_in_size != expected:
            raise ConfigError(
                f"unet_in_size: {self.unet_in_size} does not match the data pipeline output {expected}"
            )
        if self.latent and self.unet_in_ch != self.latent_channels:
            raise ConfigError(
                f"unet_in_ch: {self.unet_in_ch} must equal latent_channels {self.latent_channels} "
                "for latent diffusion"
            )
        self.schedule_config().validate()
        self.unet_config().validate()
        self.vae_config().validate()
        return self

    # -- views onto module configs --------------------------------------------
    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(self.beta_start, self.beta_end, self.num_train_timesteps,
                              self.beta_schedule, self.stability_epsilon)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            in_size=self.unet_in_size, in_ch=self.unet_in_ch, base_ch=self.unet_ch,
            ch_mult=list(self.unet_ch_mult), num_res_blocks=self.unet_num_res_blocks,
            attn_levels=list(self.unet_attn), dropout=self.unet_dropout,
            num_classes=self.num_classes if self.class_conditional else 0,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.num_epochs, self.learning_rate, self.weight_decay, self.batch_size,
                           self.seed, self.label_dropout_prob, self.log_every, self.max_steps or None)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler, self.num_inference_steps, self.eta, self.guidance_weight,
                             self.seed)

    def vae_config(self) -> VAEConfig:
        return VAEConfig(3, self.vae_ch, self.latent_channels, self.latent_factor, self.beta_kl)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in fields(RunConfig)}


def _field_type(name: str) -> str:
    default = RunConfig()
    value = getattr(default, name)
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, list):
        return "list"
    return "str"


def coerce(key: str, raw: Any) -> Any:
    """Convert a raw (usually string) value to the key's type."""
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _field_type(key)
    if not isinstance(raw, str):
        if kind == "list":
            return [int(v) for v in raw]
        if kind == "bool":
            return bool(raw)
        if kind == "float":
            return float(raw)
        if kind == "int" and isinstance(raw, (int,)) and not isinstance(raw, bool):
            return raw
    text = str(raw).strip().strip("'\"")
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "list":
            inner = text.strip("[]()").strip()
            return [int(v) for v in inner.replace(",", " ").split()] if inner else []
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_text(text: str) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def parse_config(text: str = "", overrides: Optional[Mapping[str, Any]] = None,
                 env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Resolve defaults < DIFFKIT_SEED < file text < overrides, then validate."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    if env.get(SEED_ENV):
        values["seed"] = coerce("seed", env[SEED_ENV])
    values.update(parse_text(text))
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = coerce(key, raw)
    return RunConfig(**values).validate()


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "[" + ", ".join(str(v) for v in value) + "]"
    return repr(value) if isinstance(value, float) else str(value)


def to_text(cfg: RunConfig) -> str:
    """Canonical serialisation; parses back to an equal config."""
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def config_hash(cfg: RunConfig) -> str:
    return f"{fnv1a64(to_text(cfg).encode()):016x}"
