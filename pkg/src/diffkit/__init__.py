"""Desk-scale denoising diffusion toolkit on a small numpy autodiff engine."""

from .config import RunConfig, config_hash, parse_config
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DiffkitError,
    InputError,
    NumericError,
    ShapeError,
)
from .rng import Rng
from .schedule import ScheduleConfig, ScheduleTable, add_noise, build_schedule
from .tensor import Tensor
from .unet import UNet, UNetConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataFormatError", "DiffkitError", "InputError", "NumericError",
    "Rng", "RunConfig", "ScheduleConfig", "ScheduleTable", "ShapeError", "Tensor", "UNet", "UNetConfig",
    "add_noise", "build_schedule", "config_hash", "parse_config",
]
