"""Reverse-process samplers: DDPM ancestral steps, DDIM steps, guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tn
from .data import denormalize
from .errors import ConfigError, NumericError, ShapeError
from .rng import Rng
from .schedule import ScheduleTable, posterior_variance
from .tensor import Tensor

MIN_ALPHA_BAR = 1e-12
VARIANCE_SLACK = 1e-6


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    num_inference_steps: int = 250
    eta: float = 0.0
    guidance_weight: float = 1.0
    seed: int = 42

    def validate(self, T: int) -> None:
        if self.kind not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler kind must be one of ['ddim', 'ddpm'], got {self.kind!r}")
        if not 1 <= self.num_inference_steps <= T:
            raise ConfigError(
                f"num_inference_steps must lie in [1, {T}], got {self.num_inference_steps}"
            )
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def select_timesteps(T: int, S: int) -> np.ndarray:
    """Descending timesteps (i+1)*floor(T/S) - 1 for i = S-1..0."""
    if not 1 <= S <= T:
        raise ConfigError(f"num_inference_steps {S} must lie in [1, {T}]")
    stride = T // S
    return (np.arange(S, 0, -1, dtype=np.int64) * stride) - 1


def previous_timestep(timesteps: np.ndarray, i: int) -> int:
    """The step after ``timesteps[i]``; -1 stands for clean data."""
    return int(timesteps[i + 1]) if i + 1 < len(timesteps) else -1


def ddpm_mean(table: ScheduleTable, eps, t: int, x_t) -> np.ndarray:
    alpha = table.alphas[t]
    coef = (1.0 - alpha) / math.sqrt(1.0 - table.alphas_cumprod[t])
    x, e = _arr(x_t), _arr(eps)
    return (x - x.dtype.type(coef) * e) * x.dtype.type(1.0 / math.sqrt(alpha))


def ddpm_step(table: ScheduleTable, eps, t: int, x_t, rng: Optional[Rng]) -> Tensor:
    """Ancestral step x_t -> x_{t-1} with fixed-small variance; noiseless at t = 0."""
    table.check_timesteps(t)
    mean = ddpm_mean(table, eps, t, x_t)
    if t == 0:
        return Tensor(mean, dtype=mean.dtype)
    sigma = math.sqrt(posterior_variance(table, t))
    z = rng.normal(mean.shape).astype(mean.dtype)
    return Tensor(mean + mean.dtype.type(sigma) * z, dtype=mean.dtype)


def ddim_pred_x0(table: ScheduleTable, eps, t: int, x_t) -> Tensor:
    """Clean-sample estimate (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    abar = table.alpha_bar(t)
    if abar < MIN_ALPHA_BAR:
        raise NumericError(f"alpha_bar at t={t} is {abar:.3g}; cannot invert the forward process")
    x, e = _arr(x_t), _arr(eps)
    dt = x.dtype.type
    return Tensor((x - dt(math.sqrt(1.0 - abar)) * e) / dt(math.sqrt(abar)), dtype=x.dtype)


def ddim_variance(table: ScheduleTable, t: int, prev_t: int, eta: float) -> float:
    """eta * (1 - abar_prev)/(1 - abar_t) * (1 - abar_t/abar_prev)."""
    abar_t = table.alpha_bar(t)
    abar_prev = table.alpha_bar(prev_t)
    return eta * (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev)


def ddim_step(table: ScheduleTable, eps, t: int, prev_t: int, x_t, eta: float,
              rng: Optional[Rng]) -> Tensor:
    """Generalised step x_t -> x_prev_t; deterministic when ``eta == 0``."""
    if prev_t >= t:
        raise ConfigError(f"prev_t {prev_t} must precede t {t}")
    table.check_timesteps(t)
    abar_prev = table.alpha_bar(prev_t)
    var = ddim_variance(table, t, prev_t, eta)
    direction = 1.0 - abar_prev - var
    if direction < -VARIANCE_SLACK:
        raise NumericError(
            f"schedule inconsistency at t={t}, prev_t={prev_t}: 1 - abar_prev - sigma^2 = {direction:.3g}"
        )
    pred_x0 = ddim_pred_x0(table, eps, t, x_t).data
    e = _arr(eps)
    dt = pred_x0.dtype.type
    out = dt(math.sqrt(abar_prev)) * pred_x0 + dt(math.sqrt(max(0.0, direction))) * e
    if eta > 0 and var > 0:
        out = out + dt(math.sqrt(var)) * rng.normal(out.shape).astype(out.dtype)
    return Tensor(out, dtype=out.dtype)


def cfg_combine(eps_uncond, eps_cond, w: float) -> Tensor:
    """eps_uncond + w * (eps_cond - eps_uncond)."""
    u, c = _arr(eps_uncond), _arr(eps_cond)
    if u.shape != c.shape:
        raise ShapeError(f"cfg_combine: {u.shape} vs {c.shape}")
    return Tensor(u + u.dtype.type(w) * (c - u), dtype=u.dtype)


def guided_eps(model, x_t: Tensor, t: int, labels, w: float) -> Tensor:
    """Noise prediction with classifier-free guidance.

    Unconditional models and unlabelled calls take a single pass; ``w == 1``
    needs only the conditional pass and ``w == 0`` only the null-class pass.
    """
    n = x_t.shape[0]
    tt = np.full(n, t, dtype=np.int64)
    num_classes = getattr(getattr(model, "cfg", None), "num_classes", 0)
    if num_classes == 0:
        return model(x_t, tt)
    null = np.full(n, num_classes - 1, dtype=np.int64)
    if labels is None or w == 0:
        return model(x_t, tt, null)
    labels = np.asarray(labels, dtype=np.int64)
    cond = model(x_t, tt, labels)
    if w == 1:
        return cond
    return cfg_combine(model(x_t, tt, null), cond, w)


def sample_loop(model, table: ScheduleTable, scfg: SamplerConfig, shape, labels=None,
                x_T: Optional[np.ndarray] = None, stream: int = 0) -> Tensor:
    """Run the reverse chain from pure noise; returns the model-space sample.

    ``ddpm`` always walks all T steps; ``ddim`` walks the strided subsequence.
    """
    T = table.num_train_timesteps
    scfg.validate(T)
    rng = Rng(scfg.seed, 0x5A3, stream)
    dtype = tn.default_dtype()
    x = Tensor(rng.child(0).normal(tuple(shape)) if x_T is None else x_T, dtype=dtype)
    with tn.no_grad():
        if scfg.kind == "ddpm":
            for t in range(T - 1, -1, -1):
                eps = guided_eps(model, x, t, labels, scfg.guidance_weight)
                x = ddpm_step(table, eps, t, x, rng.child(1, t))
        else:
            steps = select_timesteps(T, scfg.num_inference_steps)
            for i, t in enumerate(steps):
                eps = guided_eps(model, x, int(t), labels, scfg.guidance_weight)
                x = ddim_step(table, eps, int(t), previous_timestep(steps, i), x, scfg.eta,
                              rng.child(1, int(t)))
    return x


def generate(model, table: ScheduleTable, scfg: SamplerConfig, shape, labels=None,
             latent_codec=None, normalization: str = "unit_interval_symmetric",
             stats=None, max_batch: Optional[int] = None) -> np.ndarray:
    """Sample images as float pixels in [0, 1], shape [N, C, H, W].

    ``shape`` is the model-space shape (latent shape when a codec is given).
    Large requests are split into chunks of ``max_batch``, each drawing from
    its own stream of the seed.
    """
    n = shape[0]
    max_batch = max_batch or n
    outs = []
    for start in range(0, n, max_batch):
        stop = min(n, start + max_batch)
        chunk_labels = None if labels is None else np.asarray(labels)[start:stop]
        x = sample_loop(model, table, scfg, (stop - start,) + tuple(shape[1:]), chunk_labels,
                        stream=start)
        if latent_codec is not None:
            with tn.no_grad():
                x = latent_codec.decode_scaled(x)
        outs.append(denormalize(x, normalization, stats))
    return np.concatenate(outs)
