"""Frechet distance and Inception Score with pluggable feature backends.

The Inception network is replaced by small in-repo extractors, so values are
only comparable between runs of this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol

import numpy as np

from . import tensor as tn
from .data import Batch
from .errors import ConfigError, InputError, NumericError, ShapeError
from .layers import Params, conv, init_conv, init_linear, linear, param_count
from .optim import OptimizerState, adamw_step, zero_grad
from .rng import Rng
from .tensor import Tensor

EIG_TOLERANCE = 1e-6


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased (N - 1) covariance of rows."""
    f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if f.ndim != 2:
        raise InputError(f"features must be [N, D], got shape {f.shape}")
    if f.shape[0] < 2:
        raise InputError(f"need at least 2 feature rows, got {f.shape[0]}")
    mu = f.mean(axis=0)
    centered = f - mu
    sigma = centered.T @ centered / (f.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 rounds of n/2 disjoint index pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once; disjoint pairs are
    rotated together. Returns ``(eigenvalues, eigenvectors)`` with vectors
    as columns, eigenvalues ascending.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    size = n + (n % 2)
    if size != n:
        a = np.pad(a, ((0, 1), (0, 1)))
    v = np.eye(size)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    rounds = _round_robin(size) if size > 1 else []
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    w = np.diag(a)[:n].copy()
    v = v[:n, :n] if size != n else v
    order = np.argsort(w)
    return w[order], v[:, order]


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    a = np.asarray(a, dtype=np.float64)
    a = 0.5 * (a + a.T)
    w, v = jacobi_eigh(a)
    floor = -EIG_TOLERANCE * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if w.size and w.min() < floor:
        raise NumericError(f"matrix has eigenvalue {w.min():.3g} below tolerance; not PSD")
    root = np.sqrt(np.clip(w, 0.0, None))
    out = (v * root) @ v.T
    return 0.5 * (out + out.T)


def fid(real: GaussianStats, gen: GaussianStats) -> float:
    """||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2)."""
    if real.dim != gen.dim or real.sigma.shape != gen.sigma.shape:
        raise ShapeError(f"feature dimension mismatch: {real.dim} vs {gen.dim}")
    diff = real.mu - gen.mu
    root_r = matrix_sqrt_psd(real.sigma)
    cross = matrix_sqrt_psd(root_r @ gen.sigma @ root_r)
    return float(diff @ diff + np.trace(real.sigma) + np.trace(gen.sigma) - 2.0 * np.trace(cross))


def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if p.ndim != 2:
        raise InputError(f"probabilities must be [N, C], got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise InputError("every row must be a probability distribution (non-negative, sums to 1)")
    if splits < 1 or p.shape[0] < splits:
        raise InputError(f"need at least {splits} rows for {splits} splits, got {p.shape[0]}")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


# -- feature extractors ----------------------------------------------------------

class FeatureExtractor(Protocol):
    dim: int

    def features(self, images: Tensor) -> np.ndarray: ...

    def probs(self, images: Tensor) -> np.ndarray: ...


def _trunk(p: Params, x: Tensor, layers: int) -> Tensor:
    h = x
    for i in range(layers):
        h = tn.relu(conv(p, f"conv.{i}", h))
        if h.shape[2] % 2 == 0 and h.shape[2] > 1:
            h = tn.avg_pool2d(h, 2)
    return h.mean(axis=(2, 3))


class RandomConvExtractor:
    """Fixed-seed random conv features with a random linear softmax head."""

    def __init__(self, in_ch: int = 3, dim: int = 64, num_classes: int = 10, seed: int = 0,
                 layers: int = 2):
        rng = Rng(seed, 0xFE)
        self.dim = dim
        self.layers = layers
        self.params: Params = {}
        cin = in_ch
        for i in range(layers):
            init_conv(self.params, f"conv.{i}", rng.child(i), cin, dim, 3)
            w = self.params[f"conv.{i}.weight"]
            w.data *= math.sqrt(6.0)  # He-scale so activations keep their spread
            cin = dim
        init_linear(self.params, "head", rng.child(99), dim, num_classes)

    def features(self, images: Tensor) -> np.ndarray:
        with tn.no_grad():
            return _trunk(self.params, images, self.layers).data.astype(np.float64)

    def probs(self, images: Tensor) -> np.ndarray:
        with tn.no_grad():
            h = _trunk(self.params, images, self.layers)
            return tn.softmax(linear(self.params, "head", h)).data.astype(np.float64)


class TinyClassifier:
    """Small CNN; penultimate activations serve as FID features, softmax as IS probabilities."""

    def __init__(self, in_ch: int = 3, num_classes: int = 10, width: int = 32, seed: int = 0,
                 params: Optional[Params] = None, layers: int = 3):
        self.in_ch, self.num_classes, self.width, self.layers = in_ch, num_classes, width, layers
        self.dim = width
        if params is None:
            rng = Rng(seed, 0xC1A)
            params = {}
            cin = in_ch
            for i in range(layers):
                init_conv(params, f"conv.{i}", rng.child(i), cin, width, 3)
                cin = width
            init_linear(params, "head", rng.child(99), width, num_classes)
        self.params = params

    def logits(self, images: Tensor) -> Tensor:
        return linear(self.params, "head", _trunk(self.params, images, self.layers))

    def features(self, images: Tensor) -> np.ndarray:
        with tn.no_grad():
            return _trunk(self.params, images, self.layers).data.astype(np.float64)

    def probs(self, images: Tensor) -> np.ndarray:
        with tn.no_grad():
            return tn.softmax(self.logits(images)).data.astype(np.float64)

    def param_count(self) -> int:
        return param_count(self.params)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), np.asarray(labels)] = 1.0
    return (tn.log_softmax(logits) * Tensor(onehot, dtype=logits.dtype)).sum() * (-1.0 / n)


def train_classifier(clf: TinyClassifier, batches: Iterable[Batch], opt: Optional[OptimizerState] = None,
                     learning_rate: float = 1e-3) -> list[float]:
    """One pass of cross-entropy training; returns per-batch losses."""
    if opt is None:
        opt = OptimizerState.for_params(clf.params, learning_rate=learning_rate, weight_decay=0.0)
    losses = []
    for batch in batches:
        if batch.labels is None:
            raise ConfigError("classifier training needs labels")
        zero_grad(clf.params)
        loss = cross_entropy(clf.logits(batch.images), batch.labels)
        loss.backward()
        adamw_step(clf.params, opt)
        losses.append(loss.item())
    return losses


def collect(extractor: FeatureExtractor, images: np.ndarray, batch_size: int = 256):
    """Features and class probabilities for normalised images [N, C, H, W]."""
    feats, probs = [], []
    for i in range(0, len(images), batch_size):
        x = Tensor(images[i : i + batch_size])
        feats.append(extractor.features(x))
        probs.append(extractor.probs(x))
    return np.concatenate(feats), np.concatenate(probs)
