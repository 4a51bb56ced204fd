"""Image <-> latent codecs, including a small trainable convolutional VAE."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol

import numpy as np

from . import tensor as tn
from .data import Batch
from .errors import ConfigError, DataFormatError, NumericError, ShapeError
from .layers import Params, conv, init_conv, param_count
from .optim import OptimizerState, adamw_step, zero_grad
from .rng import Rng
from .tensor import Tensor
from .unet import DOWNSAMPLE_PAD

LATENT_MAGIC = b"DFLT"
LATENT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class LatentCodec(Protocol):
    factor: int
    latent_channels: int

    def encode(self, x: Tensor) -> Tensor: ...

    def decode(self, z: Tensor) -> Tensor: ...


@dataclass
class VAEConfig:
    in_ch: int = 3
    base_ch: int = 32
    latent_ch: int = 4
    factor: int = 4
    beta_kl: float = 1e-3

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.factor)))

    def validate(self) -> None:
        if self.factor < 1 or 2**self.levels != self.factor:
            raise ConfigError(f"latent downsample factor must be a power of 2, got {self.factor}")
        if self.latent_ch < 1 or self.base_ch < 1:
            raise ConfigError("latent_ch and base_ch must be positive")
        if self.beta_kl < 0:
            raise ConfigError("beta_kl must be >= 0")


def init_vae(cfg: VAEConfig, rng: Rng) -> Params:
    cfg.validate()
    p: Params = {}
    c = cfg.base_ch
    init_conv(p, "enc.in", rng.child(1), cfg.in_ch, c, 3)
    for i in range(cfg.levels):
        init_conv(p, f"enc.down.{i}", rng.child(2, i), c, c, 3)
        init_conv(p, f"enc.conv.{i}", rng.child(3, i), c, c, 3)
    init_conv(p, "enc.mu", rng.child(4), c, cfg.latent_ch, 3)
    init_conv(p, "enc.logvar", rng.child(5), c, cfg.latent_ch, 3)
    init_conv(p, "dec.in", rng.child(6), cfg.latent_ch, c, 3)
    for i in range(cfg.levels):
        init_conv(p, f"dec.up.{i}", rng.child(7, i), c, c, 3)
        init_conv(p, f"dec.conv.{i}", rng.child(8, i), c, c, 3)
    init_conv(p, "dec.out", rng.child(9), c, cfg.in_ch, 3)
    return p


def encoder(p: Params, cfg: VAEConfig, x: Tensor) -> tuple[Tensor, Tensor]:
    """Posterior parameters (mu, logvar), each [N, Cz, H/f, W/f]."""
    h = tn.silu(conv(p, "enc.in", x))
    for i in range(cfg.levels):
        h = tn.silu(conv(p, f"enc.down.{i}", h, stride=2, pad=DOWNSAMPLE_PAD))
        h = tn.silu(conv(p, f"enc.conv.{i}", h))
    return conv(p, "enc.mu", h), conv(p, "enc.logvar", h)


def decoder(p: Params, cfg: VAEConfig, z: Tensor) -> Tensor:
    h = tn.silu(conv(p, "dec.in", z))
    for i in range(cfg.levels):
        h = tn.silu(conv(p, f"dec.up.{i}", tn.upsample_nearest2d(h, 2)))
        h = tn.silu(conv(p, f"dec.conv.{i}", h))
    return conv(p, "dec.out", h)


def reparameterize(mu: Tensor, logvar: Tensor, rng: Rng) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
    eps = Tensor(rng.normal(mu.shape), dtype=mu.dtype)
    return mu + tn.exp(logvar * 0.5) * eps


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I)), summed over latent elements."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
    n = mu.shape[0]
    terms = 1.0 + logvar - mu * mu - tn.exp(logvar)
    return terms.sum() * (-0.5 / n)


def vae_loss(p: Params, cfg: VAEConfig, x: Tensor, beta_kl: float, rng: Rng):
    """Returns (total, recon_mse, kl) as tensors."""
    mu, logvar = encoder(p, cfg, x)
    z = reparameterize(mu, logvar, rng)
    recon = tn.mse(decoder(p, cfg, z), x)
    kl = kl_divergence(mu, logvar)
    total = recon + kl * beta_kl if beta_kl else recon
    return total, recon, kl


class VAE:
    """Trainable codec; diffusion sees posterior means times ``scale``."""

    def __init__(self, cfg: VAEConfig, params: Optional[Params] = None, seed: int = 0,
                 scale: float = 1.0):
        self.cfg = cfg
        self.params = params if params is not None else init_vae(cfg, Rng(seed, 0xAE))
        self.scale = float(scale)

    @property
    def factor(self) -> int:
        return self.cfg.factor

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_ch

    def encode(self, x: Tensor) -> Tensor:
        self._check_image(x)
        return encoder(self.params, self.cfg, x)[0]

    def decode(self, z: Tensor) -> Tensor:
        return decoder(self.params, self.cfg, z)

    def encode_scaled(self, x: Tensor) -> Tensor:
        return self.encode(x) * self.scale

    def decode_scaled(self, z: Tensor) -> Tensor:
        return self.decode(z * (1.0 / self.scale))

    def latent_shape(self, image_shape) -> tuple:
        n, _, h, w = image_shape
        return (n, self.cfg.latent_ch, h // self.factor, w // self.factor)

    def param_count(self) -> int:
        return param_count(self.params)

    def _check_image(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_ch or x.shape[2] % self.factor or x.shape[3] % self.factor:
            raise ShapeError(
                f"image {x.shape} incompatible with {self.cfg.in_ch} channels and factor {self.factor}"
            )


def vae_train_step(vae: VAE, batch: Batch, beta_kl: float, opt: OptimizerState,
                   rng: Rng) -> tuple[float, float]:
    """One AdamW update on recon MSE + beta_kl * KL; returns (recon, kl) before the update."""
    zero_grad(vae.params)
    total, recon, kl = vae_loss(vae.params, vae.cfg, batch.images, beta_kl, rng)
    value = total.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite VAE loss {value} at step {opt.step + 1}")
    total.backward()
    adamw_step(vae.params, opt)
    return recon.item(), kl.item()


def encode_dataset(codec: LatentCodec, loader: Iterable[Batch]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Posterior-mean latents for every batch, plus concatenated labels if present."""
    latents, labels = [], []
    with tn.no_grad():
        for batch in loader:
            latents.append(codec.encode(batch.images).data.copy())
            if batch.labels is not None:
                labels.append(np.asarray(batch.labels))
    if not latents:
        raise ConfigError("no batches to encode")
    return np.concatenate(latents), (np.concatenate(labels) if labels else None)


def latent_scale(latents: np.ndarray) -> float:
    """Global factor bringing latent variance to 1."""
    std = float(np.std(latents))
    if not std > 0:
        raise NumericError("latents have zero variance")
    return 1.0 / std


def save_latents(path, latents: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    """Header (magic, version, count, Cz, H, W) then float32 LE payload, then optional int32 labels."""
    latents = np.asarray(latents, dtype="<f4")
    n, c, h, w = latents.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, n, c, h, w))
        f.write(latents.tobytes())
        if labels is not None:
            f.write(np.asarray(labels, dtype="<i4").tobytes())


def load_latents(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated latent header")
    magic, version, n, c, h, w = _HEADER.unpack_from(raw)
    if magic != LATENT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {LATENT_MAGIC!r}")
    if version != LATENT_VERSION:
        raise DataFormatError(f"{path}: unsupported latent cache version {version}")
    count = n * c * h * w
    end = _HEADER.size + 4 * count
    if len(raw) < end:
        raise DataFormatError(f"{path}: payload truncated ({len(raw) - _HEADER.size} of {4 * count} bytes)")
    latents = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size).reshape(n, c, h, w)
    rest = len(raw) - end
    if rest == 0:
        return latents.copy(), None
    if rest != 4 * n:
        raise DataFormatError(f"{path}: {rest} trailing bytes, expected 0 or {4 * n} label bytes")
    return latents.copy(), np.frombuffer(raw, dtype="<i4", offset=end).astype(np.int64)
