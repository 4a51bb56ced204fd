import numpy as np
import pytest

from diffkit.data import Batch
from diffkit.errors import InputError, NumericError, ShapeError
from diffkit.metrics import (
    GaussianStats,
    RandomConvExtractor,
    TinyClassifier,
    collect,
    fid,
    fit_gaussian,
    inception_score,
    jacobi_eigh,
    matrix_sqrt_psd,
    train_classifier,
)
from diffkit.tensor import Tensor


def random_spd(rng, d, rank=None):
    a = rng.normal((d, rank or d))
    return a @ a.T / (rank or d) + (0 if rank else 1e-3) * np.eye(d)


def gauss(mu, var):
    return GaussianStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(var, float)))


class TestJacobi:
    @pytest.mark.parametrize("d", [1, 2, 5, 16, 33])
    def test_matches_lapack(self, rng, d):
        a = rng.child(d).normal((d, d))
        a = a + a.T
        w, v = jacobi_eigh(a)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(a), atol=1e-10 * max(1, np.abs(w).max()))
        np.testing.assert_allclose(v.T @ v, np.eye(d), atol=1e-10)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-10)

    def test_repeated_eigenvalues(self):
        w, v = jacobi_eigh(np.eye(4) * 3.0)
        np.testing.assert_allclose(w, 3.0)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            jacobi_eigh(np.zeros((2, 3)))


class TestMatrixSqrt:
    def test_residual(self, rng):
        for i in range(20):
            a = random_spd(rng.child(i), 12)
            m = matrix_sqrt_psd(a)
            assert np.linalg.norm(m @ m - a) / np.linalg.norm(a) < 1e-10
            np.testing.assert_allclose(m, m.T)

    def test_singular_psd(self, rng):
        a = random_spd(rng, 6, rank=2)
        m = matrix_sqrt_psd(a)
        assert np.linalg.norm(m @ m - a) / np.linalg.norm(a) < 1e-8

    def test_indefinite_rejected(self):
        with pytest.raises(NumericError):
            matrix_sqrt_psd(np.diag([1.0, -0.5]))

    def test_tiny_negative_clamped(self):
        m = matrix_sqrt_psd(np.diag([4.0, -1e-9]))
        np.testing.assert_allclose(m, np.diag([2.0, 0.0]))


class TestFid:
    def test_identical_is_zero(self, rng):
        s = fit_gaussian(rng.normal((200, 8)))
        assert abs(fid(s, s)) < 1e-9

    @pytest.mark.parametrize("a,b,expect", [
        ((0, 1), (1, 1), 1.0),
        ((0, 1), (0, 4), 1.0),
        ((2, 9), (0, 1), 8.0),
    ])
    def test_one_dimensional(self, a, b, expect):
        assert fid(gauss(*a), gauss(*b)) == pytest.approx(expect, abs=1e-9)

    def test_matches_lapack_formula(self, rng):
        a, b = random_spd(rng.child(1), 10), random_spd(rng.child(2), 10)
        mu_a, mu_b = rng.child(3).normal((10,)), rng.child(4).normal((10,))
        w, v = np.linalg.eigh(a)
        ra = (v * np.sqrt(w)) @ v.T
        w2 = np.linalg.eigvalsh(ra @ b @ ra)
        expect = np.sum((mu_a - mu_b) ** 2) + np.trace(a) + np.trace(b) - 2 * np.sum(np.sqrt(w2))
        assert fid(GaussianStats(mu_a, a), GaussianStats(mu_b, b)) == pytest.approx(expect, rel=1e-9)

    def test_symmetric(self, rng):
        a = fit_gaussian(rng.child(1).normal((50, 4)))
        b = fit_gaussian(rng.child(2).normal((50, 4)) * 2 + 1)
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            fid(gauss([0, 0], np.eye(2)), gauss(0, 1))

    def test_fit_gaussian_unbiased(self):
        f = np.array([[0.0], [2.0]])
        s = fit_gaussian(f)
        assert s.mu[0] == 1.0 and s.sigma[0, 0] == 2.0
        with pytest.raises(InputError):
            fit_gaussian(f[:1])


class TestInceptionScore:
    def test_uniform_is_one(self):
        assert inception_score(np.full((20, 5), 0.2), splits=2)[0] == pytest.approx(1.0, abs=1e-12)

    def test_balanced_one_hot_is_class_count(self):
        p = np.tile(np.eye(7), (3, 1))
        mean, std = inception_score(p, splits=3)
        assert mean == pytest.approx(7.0, abs=1e-9) and std == pytest.approx(0.0, abs=1e-9)

    def test_bounds(self, rng):
        logits = rng.normal((100, 4)) * 3
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        mean, _ = inception_score(p, splits=5)
        assert 1.0 <= mean <= 4.0

    @pytest.mark.parametrize("probs,splits", [
        (np.array([[0.5, 0.6]]), 1),
        (np.array([[1.5, -0.5]]), 1),
        (np.full((3, 2), 0.5), 4),
        (np.full(4, 0.25), 1),
    ])
    def test_invalid(self, probs, splits):
        with pytest.raises(InputError):
            inception_score(probs, splits)


class TestExtractors:
    def test_random_conv_deterministic(self, rng):
        x = rng.normal((5, 3, 8, 8))
        a, pa = collect(RandomConvExtractor(seed=3), x, batch_size=2)
        b, pb = collect(RandomConvExtractor(seed=3), x)
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)
        assert a.shape == (5, 64) and pa.shape == (5, 10)
        np.testing.assert_allclose(pa.sum(axis=1), 1.0, rtol=1e-5)

    def test_features_separate_distributions(self, rng):
        ext = RandomConvExtractor(seed=0)
        base = rng.normal((64, 3, 8, 8)) * 0.3
        f1, _ = collect(ext, base)
        f2, _ = collect(ext, rng.child(1).normal((64, 3, 8, 8)) * 0.3)
        f3, _ = collect(ext, base + 0.8)
        same, shifted = fid(fit_gaussian(f1), fit_gaussian(f2)), fid(fit_gaussian(f1), fit_gaussian(f3))
        assert shifted > 5 * same

    def test_classifier_learns_separable_classes(self):
        clf = TinyClassifier(in_ch=1, num_classes=2, width=8, seed=0, layers=2)
        x = np.concatenate([np.full((16, 1, 4, 4), 0.8), np.full((16, 1, 4, 4), -0.8)])
        y = np.array([0] * 16 + [1] * 16)
        losses = []
        for _ in range(30):
            losses += train_classifier(clf, [Batch(Tensor(x), y)], learning_rate=1e-2)
        assert losses[-1] < 0.2 * losses[0]
        probs = clf.probs(Tensor(x))
        assert (probs.argmax(axis=1) == y).all()
