import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from htrkd.numerics import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    conv2d,
    exp,
    glu,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    max_pool2d,
    sigmoid,
    softmax,
    tanh,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    @pytest.mark.parametrize(
        "x, expected",
        [
            ([0.0, 0.0], [0.5, 0.5]),
            ([math.log(1), math.log(3)], [0.25, 0.75]),
            ([1000.0, 0.0], [1.0, 0.0]),
        ],
    )
    def test_values(self, x, expected):
        out = softmax(Tensor(x)).data
        np.testing.assert_allclose(out, expected, atol=1e-12)
        assert np.all(np.isfinite(out))

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.zeros((2, 0))), axis=1)

    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_rows_are_distributions(self, x):
        p = softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
        assert (p >= 0).all()

    @given(arrays(np.float64, (4,), elements=finite))
    def test_log_softmax_matches_log_of_softmax(self, x):
        np.testing.assert_allclose(log_softmax(Tensor(x)).data, np.log(softmax(Tensor(x)).data), atol=1e-9)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_standardized_row_is_kept(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-4)

    def test_affine(self):
        # mean 3, var 1: standardized [-1, 1], then +1
        out = layer_norm(Tensor([2.0, 4.0]), Tensor(np.ones(2)), Tensor(np.ones(2))).data
        np.testing.assert_allclose(out, [0.0, 2.0], atol=1e-4)


class TestConv2d:
    def test_unit_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 4, 5))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1))).data
        np.testing.assert_array_equal(out, x)

    def test_zero_kernel_gives_bias(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.0, 2.0, 3.0]), (1, 1)).data
        assert out.shape == (1, 3, 3, 3)
        for c, v in enumerate([1.0, 2.0, 3.0]):
            np.testing.assert_array_equal(out[0, c], v)

    def test_averaging_kernel_on_ramp(self):
        ramp = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(ramp), Tensor(np.full((1, 1, 3, 3), 1 / 9)), None).data
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == pytest.approx(ramp.mean())

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))

    def test_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), (1, 1)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        Ho, Wo = xp.shape[2] - 2, xp.shape[3] - 1
        ref = np.zeros((2, 4, Ho, Wo))
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, :, i:i + 3, j:j + 2]
                ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestMaxPool:
    @pytest.mark.parametrize("size, expected", [((2, 1), [[3.0, 4.0]]), ((2, 2), [[4.0]])])
    def test_small(self, size, expected):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(max_pool2d(x, size).data[0, 0], expected)

    def test_constant(self):
        out = max_pool2d(Tensor(np.full((1, 2, 4, 6), 7.0)), (2, 2)).data
        assert out.shape == (1, 2, 2, 3)
        np.testing.assert_array_equal(out, 7.0)

    def test_gradient_routes_to_first_maximum(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = max_pool2d(x, (2, 2)).sum()
        tape.backward(y)
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


class TestTape:
    def test_shared_input_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = (x * x + x * 3.0).sum()
        tape.backward(y)
        assert x.grad[0] == pytest.approx(7.0)

    def test_getitem_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            y = (x[1] * 2.0).sum() + x[:, 0].sum()
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0], [3.0, 2.0, 2.0]])

    def test_matmul_against_numpy(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_glu_halves_channels(self, rng):
        x = rng.standard_normal((2, 4, 3))
        out = glu(Tensor(x), axis=1).data
        np.testing.assert_allclose(out, x[:, :2] / (1 + np.exp(-x[:, 2:])))


class TestGradCheck:
    def test_square(self):
        assert grad_check(lambda x: (x * x).sum(), Tensor([3.0])) < 1e-8

    def test_softmax_pick(self, rng):
        err = grad_check(lambda x: softmax(x)[2], Tensor(rng.standard_normal(5)))
        assert err < 1e-6

    def test_layer_norm_sum(self, rng):
        g, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        err = grad_check(lambda x: (layer_norm(x, g, b) * Tensor([1.0, 2.0, 3.0, 4.0])).sum(),
                         Tensor(rng.standard_normal(4)))
        assert err < 1e-6

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: x * 2.0, Tensor([1.0, 2.0]))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3,), elements=st.floats(-3, 3)))
    def test_elementwise_chain(self, x):
        f = lambda t: (tanh(t) * sigmoid(t) + exp(t * t) * 0.1).sum()  # noqa: E731
        assert grad_check(f, Tensor(x)) < 1e-6
