import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import log_softmax as sp_log_softmax
from scipy.special import softmax as sp_softmax

from htrkd.distill import (
    CLAMPED,
    ConfigError,
    LossWeights,
    aux_loss,
    ce_loss,
    interpolate_logits,
    kd_loss,
    kl_div,
    total_loss,
    weight_schedule,
)
from htrkd.numerics import NonFiniteError, Tensor

logits = arrays(np.float64, (4,), elements=st.floats(-20, 20))


def reference_kd(zt, zs, tau):
    p = sp_softmax(np.asarray(zt) / tau, axis=-1)
    return tau ** 2 * float(np.sum(p * (np.log(p) - sp_log_softmax(np.asarray(zs) / tau, axis=-1))))


class TestCrossEntropy:
    def test_perfect(self):
        assert ce_loss(Tensor(np.eye(3)), np.arange(3)).data == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("V", [2, 5, 13])
    def test_uniform(self, V):
        assert ce_loss(Tensor(np.full((4, V), 1 / V)), np.zeros(4, int)).data == pytest.approx(math.log(V))

    def test_two_class(self):
        assert ce_loss(Tensor([[0.25, 0.75]]), np.array([1])).data == pytest.approx(-math.log(0.75))

    def test_zero_probability_clamped(self):
        before = CLAMPED.count
        val = ce_loss(Tensor([[1.0, 0.0]]), np.array([1])).data
        assert val == pytest.approx(-math.log(1e-12))
        assert CLAMPED.count == before + 1

    def test_aux_is_same_formula(self, rng):
        p = sp_softmax(rng.standard_normal((3, 2, 4)), axis=-1)
        tg = rng.integers(0, 4, (3, 2))
        assert aux_loss(Tensor(p), tg).data == ce_loss(Tensor(p), tg).data

    def test_mask(self):
        p = Tensor(np.array([[[0.5, 0.5]], [[1e-3, 1 - 1e-3]]]))
        got = ce_loss(p, np.zeros((2, 1), int), mask=np.array([[1.0], [0.0]])).data
        assert got == pytest.approx(math.log(2))


class TestKL:
    def test_equal(self):
        assert kl_div([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_point_mass(self):
        assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))

    def test_swapped_sigmoids(self):
        assert kl_div([0.731, 0.269], [0.269, 0.731]) == pytest.approx(0.462, abs=1e-3)


class TestKDLoss:
    def test_equal_logits(self, rng):
        z = rng.standard_normal((5, 7))
        assert abs(float(kd_loss(z, Tensor(z), 2.0).data)) < 1e-10

    def test_tau_one_two_class(self):
        assert float(kd_loss(np.array([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), 1.0).data) == pytest.approx(0.462, abs=1e-3)

    def test_tau_two_two_class(self):
        expected = 4 * kl_div(sp_softmax([0.5, 0.0]), sp_softmax([0.0, 0.5]))
        got = float(kd_loss(np.array([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), 2.0).data)
        assert got == pytest.approx(expected, rel=1e-12)
        # two-class closed form: KL = (p - q) * logit gap = tanh(1/4) * 1/2
        assert got == pytest.approx(4 * 0.5 * math.tanh(0.25), rel=1e-12)

    @pytest.mark.parametrize("tau", [0.0, -1.0, math.inf])
    def test_bad_temperature(self, tau):
        with pytest.raises(ConfigError):
            kd_loss(np.zeros((1, 2)), Tensor(np.zeros((1, 2))), tau)

    @settings(max_examples=100, deadline=None)
    @given(logits, logits, st.floats(0.5, 8.0))
    def test_matches_reference_and_nonnegative(self, zt, zs, tau):
        got = float(kd_loss(zt[None], Tensor(zs[None]), tau).data)
        assert got >= -1e-12
        assert got == pytest.approx(reference_kd(zt, zs, tau), rel=1e-9, abs=1e-12)

    def test_student_time_axis_is_interpolated(self, rng):
        zt = rng.standard_normal((5, 3))
        zs = np.linspace(0, 1, 3)[:, None] * np.ones((1, 3))
        got = float(kd_loss(zt, Tensor(zs), 1.0).data)
        zs5 = np.linspace(0, 1, 5)[:, None] * np.ones((1, 3))
        assert got == pytest.approx(np.mean([reference_kd(zt[i], zs5[i], 1.0) for i in range(5)]))


class TestInterpolation:
    def test_constant(self):
        z = np.tile([1.0, -2.0], (4, 1))
        np.testing.assert_allclose(interpolate_logits(Tensor(z), 9).data, np.tile([1.0, -2.0], (9, 1)))

    def test_identity(self, rng):
        z = Tensor(rng.standard_normal((4, 3)))
        assert interpolate_logits(z, 4) is z

    def test_midpoint(self):
        np.testing.assert_allclose(interpolate_logits(Tensor([[0.0], [2.0]]), 3).data, [[0.0], [1.0], [2.0]])

    def test_bad_length(self):
        with pytest.raises(ConfigError):
            interpolate_logits(Tensor(np.zeros((2, 1))), 0)


class TestSchedule:
    @pytest.mark.parametrize(
        "epoch, expected",
        [(0, (0.7, 0.0, 0.2, 0.1)), (100, (0.4, 0.0, 0.5, 0.1)), (50, (0.55, 0.0, 0.35, 0.1))],
    )
    def test_anchor_points(self, epoch, expected):
        np.testing.assert_allclose(weight_schedule(epoch, 100).as_tuple(), expected, atol=1e-12)

    @given(st.integers(1, 500), st.data())
    def test_sums_to_one(self, total, data):
        e = data.draw(st.integers(0, total))
        for kd in (True, False):
            w = weight_schedule(e, total, kd=kd)
            assert math.fsum(w.as_tuple()) == 1.0
            assert sum(w.as_tuple()) == 1.0
            assert w.delta == 0.1

    def test_no_kd_moves_gamma_to_alpha(self):
        w = weight_schedule(0, 10, kd=False)
        assert w.gamma == 0.0
        assert w.alpha == pytest.approx(0.9)

    def test_bad_weights(self):
        with pytest.raises(ConfigError):
            LossWeights(0.5, 0.5, 0.5, -0.5)


class TestTotalLoss:
    def test_ctc_alone(self):
        assert float(total_loss({"ctc": Tensor(3.0)}, LossWeights(1, 0, 0, 0)).data) == 3.0

    def test_zero_parts(self):
        parts = {k: Tensor(0.0) for k in ("ctc", "ce", "kd", "aux")}
        assert float(total_loss(parts, weight_schedule(3, 10)).data) == 0.0

    def test_dot_product(self):
        parts = {"ctc": Tensor(2.0), "ce": Tensor(1.0), "kd": Tensor(3.0), "aux": Tensor(1.0)}
        assert float(total_loss(parts, LossWeights(0.4, 0.0, 0.5, 0.1)).data) == pytest.approx(2.4)

    def test_non_finite_part_named(self):
        with pytest.raises(NonFiniteError, match="kd"):
            total_loss({"ctc": Tensor(1.0), "kd": Tensor(np.nan), "aux": Tensor(0.0)}, weight_schedule(0, 5))
