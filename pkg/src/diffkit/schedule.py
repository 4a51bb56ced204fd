"""Noise schedules and the closed-form forward process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, broadcast_to, mul

BETA_MAX = 0.999
COSINE_ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class ScheduleConfig:
    beta_start: float = 0.0002
    beta_end: float = 0.02
    num_train_timesteps: int = 1000
    beta_schedule: str = "linear"
    stability_epsilon: float = 1e-8

    def validate(self) -> None:
        if self.num_train_timesteps < 2:
            raise ConfigError(f"num_train_timesteps must be >= 2, got {self.num_train_timesteps}")
        if self.beta_schedule not in ("linear", "cosine"):
            raise ConfigError(
                f"beta_schedule must be one of ['cosine', 'linear'], got {self.beta_schedule!r}"
            )
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.stability_epsilon <= 0:
            raise ConfigError("stability_epsilon must be positive")


@dataclass(frozen=True)
class ScheduleTable:
    """Per-timestep constants, indexed by t in [0, T-1]. Stored in float64."""

    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alphas_cumprod: np.ndarray
    config: ScheduleConfig = field(default_factory=ScheduleConfig)

    @property
    def num_train_timesteps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention, with the clean-data sentinel ``t = -1 -> 1``."""
        if t < 0:
            return 1.0
        return float(self.alphas_cumprod[t])

    def check_timesteps(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.num_train_timesteps):
            raise IndexError(f"timesteps must lie in [0, {self.num_train_timesteps - 1}], got {t}")
        return t


def build_linear(cfg: ScheduleConfig) -> ScheduleTable:
    cfg.validate()
    T = cfg.num_train_timesteps
    i = np.arange(T, dtype=np.float64)
    betas = cfg.beta_start + (i / (T - 1)) * (cfg.beta_end - cfg.beta_start)
    alphas = 1.0 - betas
    return ScheduleTable("linear", betas, alphas, np.cumprod(alphas), cfg)


def cosine_alpha_bar(t, T: int) -> np.ndarray:
    """cos^2(pi/2 * t/T), floored so the last step never reaches zero."""
    raw = np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64) / T) ** 2
    return np.maximum(raw, COSINE_ALPHA_BAR_FLOOR)


def build_cosine(cfg: ScheduleConfig) -> ScheduleTable:
    """Cosine schedule on the grid t = 1..T, stored at indices 0..T-1.

    The retention ratio uses ``stability_epsilon`` in its denominator and
    betas are clipped at 0.999; the stored cumulative product is the running
    product of the resulting alphas.
    """
    cfg.validate()
    T = cfg.num_train_timesteps
    grid = cosine_alpha_bar(np.arange(T + 1), T)  # grid[s] at s = 0..T, grid[0] = 1
    alphas = grid[1:] / (grid[:-1] + cfg.stability_epsilon)
    betas = np.clip(1.0 - alphas, 0.0, BETA_MAX)
    alphas = 1.0 - betas
    return ScheduleTable("cosine", betas, alphas, np.cumprod(alphas), cfg)


def build_schedule(cfg: ScheduleConfig) -> ScheduleTable:
    if cfg.beta_schedule == "linear":
        return build_linear(cfg)
    if cfg.beta_schedule == "cosine":
        return build_cosine(cfg)
    cfg.validate()
    raise AssertionError("unreachable")


def _per_sample(values: np.ndarray, like: Tensor) -> Tensor:
    """Broadcast a length-N vector of coefficients over a batch tensor."""
    n = like.shape[0]
    col = Tensor(values.reshape((n,) + (1,) * (like.ndim - 1)), dtype=like.dtype)
    return broadcast_to(col, like.shape)


def add_noise(table: ScheduleTable, x0: Tensor, noise: Tensor, timesteps) -> Tensor:
    """Sample x_t from q(x_t | x_0) using each batch element's own timestep."""
    if x0.shape != noise.shape:
        raise ShapeError(f"add_noise: x0 {x0.shape} vs noise {noise.shape}")
    t = table.check_timesteps(np.broadcast_to(np.asarray(timesteps), (x0.shape[0],)))
    abar = table.alphas_cumprod[t]
    return add(mul(_per_sample(np.sqrt(abar), x0), x0), mul(_per_sample(np.sqrt(1.0 - abar), noise), noise))


def posterior_variance(table: ScheduleTable, t: int) -> float:
    """Fixed-small reverse variance ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t; zero at t = 0."""
    t = int(table.check_timesteps(t))
    if t == 0:
        return 0.0
    abar_t = table.alphas_cumprod[t]
    abar_prev = table.alphas_cumprod[t - 1]
    return float((1.0 - abar_prev) / (1.0 - abar_t) * table.betas[t])


def dump_rows(table: ScheduleTable) -> list[tuple[int, float, float, float]]:
    return [
        (t, float(table.betas[t]), float(table.alphas[t]), float(table.alphas_cumprod[t]))
        for t in range(table.num_train_timesteps)
    ]
