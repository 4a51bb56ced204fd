"""Parameter initialisers and functional layers over named parameter dicts."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .rng import Rng
from .tensor import Tensor

Params = dict[str, Tensor]


def num_groups(channels: int, max_groups: int = 32) -> int:
    """Largest group count <= max_groups dividing ``channels`` with >= 2 channels per group.

    One-channel groups would be instance norm, which strips each channel's
    spatial mean; for narrow models that mean is often the signal.
    """
    for g in range(min(max_groups, channels // 2), 0, -1):
        if channels % g == 0:
            return g
    return 1


def init_conv(params: Params, name: str, rng: Rng, cin: int, cout: int, k: int,
              zero: bool = False) -> None:
    bound = 1.0 / math.sqrt(cin * k * k)
    w = np.zeros((cout, cin, k, k)) if zero else (rng.uniform((cout, cin, k, k)) * 2 - 1) * bound
    params[f"{name}.weight"] = tn.parameter(w)
    params[f"{name}.bias"] = tn.parameter(np.zeros(cout))


def init_linear(params: Params, name: str, rng: Rng, fin: int, fout: int) -> None:
    bound = 1.0 / math.sqrt(fin)
    params[f"{name}.weight"] = tn.parameter((rng.uniform((fin, fout)) * 2 - 1) * bound)
    params[f"{name}.bias"] = tn.parameter(np.zeros(fout))


def init_norm(params: Params, name: str, channels: int) -> None:
    params[f"{name}.gamma"] = tn.parameter(np.ones(channels))
    params[f"{name}.beta"] = tn.parameter(np.zeros(channels))


def conv(params: Params, name: str, x: Tensor, stride: int = 1, pad=None) -> Tensor:
    w = params[f"{name}.weight"]
    if pad is None:
        pad = w.shape[-1] // 2
    return tn.conv2d(x, w, params[f"{name}.bias"], stride=stride, pad=pad)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    w = params[f"{name}.weight"]
    b = params[f"{name}.bias"]
    out = tn.matmul(x, w)
    return out + tn.broadcast_to(tn.reshape(b, (1, b.shape[0])), out.shape)


def norm(params: Params, name: str, x: Tensor) -> Tensor:
    gamma = params[f"{name}.gamma"]
    return tn.group_norm(x, num_groups(gamma.shape[0]), gamma, params[f"{name}.beta"])


def add_channel_vector(h: Tensor, v: Tensor) -> Tensor:
    """h[N,C,H,W] + v[N,C] broadcast over space."""
    n, c = v.shape
    return h + tn.broadcast_to(tn.reshape(v, (n, c, 1, 1)), h.shape)


def param_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))
