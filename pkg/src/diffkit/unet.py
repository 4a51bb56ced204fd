"""Epsilon-prediction UNet with time and class conditioning.

Layout: conv_in, then per resolution level ``num_res_blocks`` residual blocks
(optionally followed by self-attention) and a stride-2 downsample; a
bottleneck of two residual blocks around one attention block; a mirrored
decoder whose blocks consume the stored encoder activations by channel
concatenation (``num_res_blocks + 1`` per level) with nearest upsampling;
and a GroupNorm/SiLU/conv head whose conv starts at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tn
from .errors import ConfigError, InputError
from .layers import (
    Params,
    add_channel_vector,
    conv,
    init_conv,
    init_linear,
    init_norm,
    linear,
    norm,
    param_count,
)
from .rng import Rng
from .tensor import Tensor

# Pad bottom/right only so a 3x3 stride-2 conv halves even sizes exactly.
DOWNSAMPLE_PAD = (0, 1, 0, 1)


@dataclass
class UNetConfig:
    in_size: int = 32
    in_ch: int = 3
    base_ch: int = 64
    ch_mult: list[int] = field(default_factory=lambda: [1, 2, 4, 4])
    num_res_blocks: int = 3
    attn_levels: list[int] = field(default_factory=lambda: [2, 3])
    dropout: float = 0.1
    num_classes: int = 0
    time_embed_dim: Optional[int] = None

    def __post_init__(self):
        if self.time_embed_dim is None:
            self.time_embed_dim = 4 * self.base_ch
        self.ch_mult = list(self.ch_mult)
        self.attn_levels = list(self.attn_levels)

    @property
    def null_class(self) -> Optional[int]:
        """Label reserved for the unconditional branch of guidance."""
        return self.num_classes - 1 if self.num_classes > 0 else None

    def validate(self) -> None:
        levels = len(self.ch_mult)
        if levels < 1 or self.num_res_blocks < 1:
            raise ConfigError("ch_mult and num_res_blocks must be non-empty/positive")
        if self.in_size % (2 ** (levels - 1)):
            raise ConfigError(
                f"unet_in_size {self.in_size} not divisible by 2^{levels - 1} for ch_mult {self.ch_mult}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"unet_dropout must lie in [0, 1), got {self.dropout}")
        bad = [a for a in self.attn_levels if not 0 <= a < levels]
        if bad:
            raise ConfigError(f"unet_attn levels {bad} outside [0, {levels - 1}]")
        if self.base_ch % 2:
            raise ConfigError("unet_ch must be even for the sinusoidal embedding")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features: e[2i] = sin(t w_i), e[2i+1] = cos(t w_i)."""
    if dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0):
        raise InputError("timesteps must be non-negative")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    args = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out


def time_embedding(params: Params, cfg: UNetConfig, t) -> Tensor:
    raw = Tensor(sinusoidal_embedding(t, cfg.base_ch), dtype=params["temb.0.weight"].dtype)
    h = tn.silu(linear(params, "temb.0", raw))
    return linear(params, "temb.1", h)


# -- blocks ------------------------------------------------------------------

def _init_resblock(params: Params, name: str, rng: Rng, cin: int, cout: int, temb: int) -> None:
    init_norm(params, f"{name}.norm1", cin)
    init_conv(params, f"{name}.conv1", rng.child(1), cin, cout, 3)
    init_linear(params, f"{name}.temb", rng.child(2), temb, cout)
    init_norm(params, f"{name}.norm2", cout)
    init_conv(params, f"{name}.conv2", rng.child(3), cout, cout, 3)
    if cin != cout:
        init_conv(params, f"{name}.skip", rng.child(4), cin, cout, 1)


def resblock(params: Params, name: str, x: Tensor, temb: Tensor, dropout: float,
             rng: Optional[Rng]) -> Tensor:
    h = conv(params, f"{name}.conv1", tn.silu(norm(params, f"{name}.norm1", x)))
    h = add_channel_vector(h, linear(params, f"{name}.temb", tn.silu(temb)))
    h = tn.silu(norm(params, f"{name}.norm2", h))
    h = conv(params, f"{name}.conv2", tn.dropout(h, dropout, rng))
    skip = conv(params, f"{name}.skip", x) if f"{name}.skip.weight" in params else x
    return skip + h


def _init_attn(params: Params, name: str, rng: Rng, ch: int) -> None:
    init_norm(params, f"{name}.norm", ch)
    init_conv(params, f"{name}.qkv", rng.child(1), ch, 3 * ch, 1)
    init_conv(params, f"{name}.proj", rng.child(2), ch, ch, 1)


def self_attention(params: Params, name: str, x: Tensor) -> Tensor:
    """Single-head attention over flattened spatial positions, with residual."""
    n, c, hgt, wid = x.shape
    qkv = conv(params, f"{name}.qkv", norm(params, f"{name}.norm", x))
    qkv = tn.reshape(qkv, (n, 3, c, hgt * wid))
    q = tn.reshape(_slice_axis1(qkv, 0), (n, c, hgt * wid))
    k = tn.reshape(_slice_axis1(qkv, 1), (n, c, hgt * wid))
    v = tn.reshape(_slice_axis1(qkv, 2), (n, c, hgt * wid))
    scores = tn.matmul(tn.transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(c))
    weights = tn.softmax(scores, axis=-1)  # [n, query, key]
    out = tn.matmul(v, tn.transpose(weights, (0, 2, 1)))  # [n, c, query]
    out = conv(params, f"{name}.proj", tn.reshape(out, (n, c, hgt, wid)))
    return x + out


def _slice_axis1(x: Tensor, i: int) -> Tensor:
    data = x.data[:, i]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, i] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(data), (x,), backward, "slice")


# -- model ---------------------------------------------------------------------

def _plan(cfg: UNetConfig):
    """Channel bookkeeping: encoder block widths and the skip stack."""
    chans = [cfg.base_ch * m for m in cfg.ch_mult]
    skips = [cfg.base_ch]
    enc = []
    ch = cfg.base_ch
    for level, out_ch in enumerate(chans):
        for b in range(cfg.num_res_blocks):
            enc.append((level, b, ch, out_ch))
            ch = out_ch
            skips.append(ch)
        if level != len(chans) - 1:
            skips.append(ch)
    dec = []
    for level in reversed(range(len(chans))):
        out_ch = chans[level]
        for b in range(cfg.num_res_blocks + 1):
            cin = ch + skips.pop()
            dec.append((level, b, cin, out_ch))
            ch = out_ch
    return chans, enc, dec


def init_params(cfg: UNetConfig, rng: Rng) -> Params:
    cfg.validate()
    params: Params = {}
    temb = cfg.time_embed_dim
    init_linear(params, "temb.0", rng.child(1), cfg.base_ch, temb)
    init_linear(params, "temb.1", rng.child(2), temb, temb)
    if cfg.num_classes > 0:
        params["class_embed"] = tn.parameter(rng.child(3).normal((cfg.num_classes, temb)) * 0.02)
    init_conv(params, "conv_in", rng.child(4), cfg.in_ch, cfg.base_ch, 3)
    chans, enc, dec = _plan(cfg)
    for i, (level, b, cin, cout) in enumerate(enc):
        _init_resblock(params, f"down.{level}.res.{b}", rng.child(100, i), cin, cout, temb)
        if level in cfg.attn_levels:
            _init_attn(params, f"down.{level}.attn.{b}", rng.child(200, i), cout)
    for level in range(len(chans) - 1):
        init_conv(params, f"down.{level}.downsample", rng.child(300, level), chans[level], chans[level], 3)
    mid = chans[-1]
    _init_resblock(params, "mid.res.0", rng.child(400), mid, mid, temb)
    _init_attn(params, "mid.attn", rng.child(401), mid)
    _init_resblock(params, "mid.res.1", rng.child(402), mid, mid, temb)
    for i, (level, b, cin, cout) in enumerate(dec):
        _init_resblock(params, f"up.{level}.res.{b}", rng.child(500, i), cin, cout, temb)
        if level in cfg.attn_levels:
            _init_attn(params, f"up.{level}.attn.{b}", rng.child(600, i), cout)
    for level in range(1, len(chans)):
        init_conv(params, f"up.{level}.upsample", rng.child(700, level), chans[level], chans[level], 3)
    init_norm(params, "out.norm", cfg.base_ch)
    init_conv(params, "out.conv", rng.child(800), cfg.base_ch, cfg.in_ch, 3, zero=True)
    return params


def _check_inputs(cfg: UNetConfig, x: Tensor, t, labels) -> None:
    if x.ndim != 4 or x.shape[1] != cfg.in_ch or x.shape[2] != cfg.in_size or x.shape[3] != cfg.in_size:
        raise InputError(
            f"input shape {x.shape} does not match [N, {cfg.in_ch}, {cfg.in_size}, {cfg.in_size}]"
        )
    if np.asarray(t).shape not in ((), (x.shape[0],)):
        raise InputError(f"expected {x.shape[0]} timesteps, got shape {np.asarray(t).shape}")
    if cfg.num_classes > 0:
        if labels is None:
            raise InputError("class-conditional model needs labels")
        labels = np.asarray(labels)
        if labels.shape != (x.shape[0],):
            raise InputError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
        if np.any(labels < 0) or np.any(labels >= cfg.num_classes):
            raise InputError(f"labels must lie in [0, {cfg.num_classes - 1}]")
    elif labels is not None:
        raise InputError("unconditional model (num_classes = 0) takes no labels")


def forward(params: Params, cfg: UNetConfig, x: Tensor, t, labels=None,
            rng: Optional[Rng] = None) -> Tensor:
    """Predict the noise in ``x``. Dropout is active only when ``rng`` is given."""
    _check_inputs(cfg, x, t, labels)
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    temb = time_embedding(params, cfg, t)
    if cfg.num_classes > 0:
        temb = temb + tn.take_rows(params["class_embed"], np.asarray(labels))
    drop = cfg.dropout if rng is not None else 0.0
    chans, enc, dec = _plan(cfg)
    block_rng = (lambda *k: rng.child(*k)) if rng is not None else (lambda *k: None)

    h = conv(params, "conv_in", x)
    skips = [h]
    i = 0
    for level in range(len(chans)):
        for b in range(cfg.num_res_blocks):
            h = resblock(params, f"down.{level}.res.{b}", h, temb, drop, block_rng(1, i))
            if level in cfg.attn_levels:
                h = self_attention(params, f"down.{level}.attn.{b}", h)
            skips.append(h)
            i += 1
        if level != len(chans) - 1:
            h = conv(params, f"down.{level}.downsample", h, stride=2, pad=DOWNSAMPLE_PAD)
            skips.append(h)

    h = resblock(params, "mid.res.0", h, temb, drop, block_rng(2, 0))
    h = self_attention(params, "mid.attn", h)
    h = resblock(params, "mid.res.1", h, temb, drop, block_rng(2, 1))

    i = 0
    for level in reversed(range(len(chans))):
        for b in range(cfg.num_res_blocks + 1):
            h = tn.concat([h, skips.pop()], axis=1)
            h = resblock(params, f"up.{level}.res.{b}", h, temb, drop, block_rng(3, i))
            if level in cfg.attn_levels:
                h = self_attention(params, f"up.{level}.attn.{b}", h)
            i += 1
        if level != 0:
            h = conv(params, f"up.{level}.upsample", tn.upsample_nearest2d(h, 2))

    h = tn.silu(norm(params, "out.norm", h))
    return conv(params, "out.conv", h)


class UNet:
    """Bundles a config with its parameters; callable as the noise predictor."""

    def __init__(self, cfg: UNetConfig, params: Optional[Params] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, Rng(seed, 0x0E7))

    def __call__(self, x: Tensor, t, labels=None, rng: Optional[Rng] = None) -> Tensor:
        return forward(self.params, self.cfg, x, t, labels, rng)

    def param_count(self) -> int:
        return param_count(self.params)
