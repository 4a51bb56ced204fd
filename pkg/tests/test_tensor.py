import numpy as np
import pytest

from diffkit import tensor as tn
from diffkit.errors import ConfigError, ContractError, ShapeError
from diffkit.rng import Rng
from diffkit.tensor import Tensor
from support import gradcheck, naive_conv2d

TOL = 1e-6


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return tn.parameter(lo + (hi - lo) * rng.uniform(shape))


@pytest.mark.usefixtures("double")
class TestElementwiseGradients:
    @pytest.mark.parametrize("op", [tn.exp, tn.sigmoid, tn.silu, tn.tanh, tn.neg])
    def test_unary(self, rng, op):
        x = leaf(rng, (3, 4))
        assert gradcheck(lambda a: (op(a) * op(a)).sum(), [x], rng) < TOL

    def test_log_and_sqrt_on_positive_inputs(self, rng):
        x = leaf(rng, (5,), 0.5, 2.0)
        assert gradcheck(lambda a: (tn.log(a) + tn.sqrt(a)).sum(), [x], rng) < TOL

    def test_relu_away_from_kink(self, rng):
        x = tn.parameter(np.array([-1.5, -0.3, 0.4, 2.0]))
        assert gradcheck(lambda a: (tn.relu(a) * a).sum(), [x], rng) < TOL

    def test_binary_ops(self, rng):
        a, b = leaf(rng.child(1), (2, 3)), leaf(rng.child(2), (2, 3), 0.5, 1.5)
        assert gradcheck(lambda p, q: ((p + q) * (p - q) / q).sum(), [a, b], rng) < TOL

    def test_power(self, rng):
        x = leaf(rng, (4,), 0.5, 2.0)
        assert gradcheck(lambda a: (a**3.0 + a**-0.5).sum(), [x], rng) < TOL

    def test_scalar_tensor_broadcast(self, rng):
        x, s = leaf(rng.child(1), (3, 2)), leaf(rng.child(2), ())
        assert gradcheck(lambda a, c: (a * c + c).sum(), [x, s], rng) < TOL

    def test_python_scalars_on_either_side(self, rng):
        x = leaf(rng, (3,))
        assert gradcheck(lambda a: (2.0 * a + 1.0 - (3.0 - a) * 0.5).sum(), [x], rng) < TOL

    def test_mean_with_axis(self, rng):
        x = leaf(rng, (2, 3, 4))
        assert gradcheck(lambda a: (a.mean(axis=(1, 2)) ** 2.0).sum(), [x], rng) < TOL


@pytest.mark.usefixtures("double")
class TestStructuralGradients:
    def test_reshape_transpose_concat(self, rng):
        a, b = leaf(rng.child(1), (2, 3, 4)), leaf(rng.child(2), (2, 1, 4))
        w = rng.normal((2, 4, 4))

        def f(p, q):
            h = tn.concat([p, q], axis=1)
            return (tn.transpose(h, (0, 2, 1)).reshape(2, 16) ** 2.0).sum() + (h * Tensor(w)).sum()

        assert gradcheck(f, [a, b], rng) < TOL

    def test_broadcast_to(self, rng):
        v = leaf(rng, (1, 3, 1, 1))
        w = Tensor(rng.normal((2, 3, 4, 4)))
        assert gradcheck(lambda a: (tn.broadcast_to(a, (2, 3, 4, 4)) * w).sum(), [v], rng) < TOL

    def test_matmul_2d_and_batched(self, rng):
        a, b = leaf(rng.child(1), (3, 4)), leaf(rng.child(2), (4, 2))
        assert gradcheck(lambda p, q: ((p @ q) ** 2.0).sum(), [a, b], rng) < TOL
        c, d = leaf(rng.child(3), (2, 3, 4)), leaf(rng.child(4), (2, 4, 5))
        assert gradcheck(lambda p, q: ((p @ q) ** 2.0).sum(), [c, d], rng) < TOL

    def test_take_rows_accumulates_repeats(self, rng):
        table = leaf(rng, (5, 3))
        idx = np.array([0, 2, 2, 4])
        out = tn.take_rows(table, idx).sum()
        out.backward()
        np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 0, 1])

    def test_softmax_and_log_softmax(self, rng):
        x = leaf(rng, (3, 5))
        w = Tensor(rng.normal((3, 5)))
        assert gradcheck(lambda a: (tn.softmax(a) * w).sum(), [x], rng) < TOL
        assert gradcheck(lambda a: (tn.log_softmax(a) * w).sum(), [x], rng) < TOL

    def test_group_norm_with_affine(self, rng):
        x = leaf(rng, (2, 4, 3, 3))
        g, b = leaf(rng.child(1), (4,), 0.5, 1.5), leaf(rng.child(2), (4,))
        w = Tensor(rng.normal((2, 4, 3, 3)))
        assert gradcheck(lambda a, gg, bb: (tn.group_norm(a, 2, gg, bb) * w).sum(), [x, g, b], rng, 8) < 1e-5

    def test_pool_and_upsample(self, rng):
        x = leaf(rng, (1, 2, 4, 4))
        w = Tensor(rng.normal((1, 2, 4, 4)))
        assert gradcheck(lambda a: (tn.upsample_nearest2d(tn.avg_pool2d(a, 2)) * w).sum(), [x], rng) < TOL

    def test_dropout_mask_is_reused_in_backward(self, rng):
        x = leaf(rng, (50,))
        y = tn.dropout(x, 0.5, Rng(3))
        y.sum().backward()
        np.testing.assert_allclose(x.grad, np.where(y.data != 0, 2.0, 0.0))


@pytest.mark.usefixtures("double")
class TestConv2d:
    @pytest.mark.parametrize("size,stride,pad", [(6, 1, 1), (6, 1, 0), (7, 2, 1), (6, 2, (0, 1, 0, 1))])
    def test_matches_direct_loop_on_integers(self, rng, size, stride, pad):
        x = rng.integers(-3, 4, (2, 3, size, size)).astype(np.float64)
        w = rng.child(1).integers(-2, 3, (4, 3, 3, 3)).astype(np.float64)
        b = rng.child(2).integers(-2, 3, (4,)).astype(np.float64)
        got = tn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_array_equal(got, naive_conv2d(x, w, b, stride, pad))

    def test_matches_direct_loop_on_floats(self, rng):
        x, w = rng.normal((2, 3, 5, 5)), rng.child(1).normal((2, 3, 3, 3))
        got = tn.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, None, 1, 1), atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, (0, 1, 0, 1))])
    def test_gradients(self, rng, stride, pad):
        x, w, b = leaf(rng, (2, 2, 4, 4)), leaf(rng.child(1), (3, 2, 3, 3)), leaf(rng.child(2), (3,))
        assert gradcheck(lambda a, k, c: (tn.conv2d(a, k, c, stride, pad) ** 2.0).sum(), [x, w, b], rng, 8) < TOL

    def test_non_integer_output_size_rejected(self):
        with pytest.raises(ConfigError):
            tn.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), None, 2, 0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            tn.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestGraphContract:
    def test_non_scalar_backward_rejected(self):
        x = tn.parameter(np.ones(3))
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_gradients_accumulate_on_leaves(self):
        x = tn.parameter(np.array([1.0, 2.0]))
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        with tn.precision(np.float64):
            x = tn.parameter(np.array([1.5]))
            y = x * x
            (y * y + y).sum().backward()
            # d/dx (x^4 + x^2) = 4x^3 + 2x
            np.testing.assert_allclose(x.grad, [4 * 1.5**3 + 2 * 1.5])

    def test_no_grad_records_nothing(self):
        x = tn.parameter(np.ones(2))
        with tn.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_default_dtype_and_precision_context(self):
        assert Tensor(np.ones(2)).dtype == np.float32
        with tn.precision(np.float64):
            assert Tensor(np.ones(2)).dtype == np.float64
        assert Tensor(np.ones(2)).dtype == np.float32

    def test_topological_order_puts_root_last(self):
        x = tn.parameter(np.ones(2))
        y = tn.exp(x)
        z = (y * y).sum()
        order = tn.topological_order(z)
        assert order[-1] is z and order.index(x) < order.index(y)

    def test_deep_chain_does_not_recurse(self):
        x = tn.parameter(np.ones(1))
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0
