"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from diffkit import tensor as tn
from diffkit.rng import Rng


def numeric_grad(f, arr: np.ndarray, index, h: float = 1e-6) -> float:
    """Central difference of scalar ``f()`` with respect to ``arr[index]``."""
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(build, inputs: list[tn.Tensor], rng: Rng, samples: int = 6, h: float = 1e-6) -> float:
    """Max relative error between autodiff and finite differences.

    ``build`` maps the input tensors to a scalar tensor; it must be pure.
    """
    for x in inputs:
        x.grad = None
    loss = build(*inputs)
    loss.backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = rng.child(k).integers(0, x.data.size, samples)
        for j in flat:
            idx = np.unravel_index(int(j), x.shape)
            num = numeric_grad(lambda: build(*inputs).item(), x.data, idx, h)
            worst = max(worst, relative_error(float(analytic[idx]), num))
    return worst


def naive_conv2d(x: np.ndarray, w: np.ndarray, b, stride: int, pad) -> np.ndarray:
    """Direct loop cross-correlation used as an oracle."""
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    pt, pb, pl, pr = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, c, h, wd = xp.shape
    k, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, k, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,kchw->nk", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def tiny_unet_config(**overrides):
    from diffkit.unet import UNetConfig

    base = dict(in_size=8, in_ch=1, base_ch=8, ch_mult=[1, 2], num_res_blocks=1, attn_levels=[1],
                dropout=0.0, num_classes=0)
    base.update(overrides)
    return UNetConfig(**base)


def params_gradcheck(loss_fn, params: dict, rng: Rng, count: int = 20, h: float = 1e-6,
                     floor: float = 1e-6) -> float:
    """Max relative error over ``count`` random parameter entries of ``loss_fn()``.

    Gradients smaller than ``floor`` are compared against ``floor``: central
    differences with step ``h`` carry round-off near eps / h.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    names = sorted(params)
    worst = 0.0
    for k in range(count):
        r = rng.child(k)
        name = names[int(r.integers(0, len(names), 1)[0])]
        p = params[name]
        idx = np.unravel_index(int(r.integers(0, p.size, 1)[0]), p.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        num = numeric_grad(lambda: loss_fn().item(), p.data, idx, h)
        worst = max(worst, relative_error(analytic, num, floor))
    return worst


def randomize_zero_params(params: dict, rng: Rng, scale: float = 0.1) -> None:
    """Give zero-initialised tensors (output conv, norm betas) random values so every path carries gradient."""
    for i, name in enumerate(sorted(params)):
        p = params[name]
        if not np.any(p.data):
            p.data[...] = scale * rng.child(i).normal(p.shape)


def cifar_fixture_bytes(n: int = 10, seed: int = 0) -> tuple[bytes, np.ndarray, np.ndarray]:
    """``n`` hand-built CIFAR-10 records plus the expected labels and images."""
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = r.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
    records = [bytes([int(lab)]) + images[i].tobytes() for i, lab in enumerate(labels)]
    return b"".join(records), labels, images
