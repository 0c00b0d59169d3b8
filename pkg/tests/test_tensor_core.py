import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xdr.tensor_core import (
    EPS_CLIP,
    AdamState,
    adam_step,
    bce_from_logits,
    binary_cross_entropy,
    finite_difference_check,
    segment_softmax,
    sigmoid,
    stable_softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSigmoid:
    def test_midpoint(self):
        assert sigmoid(0.0) == 0.5

    @pytest.mark.parametrize("x", [-5.0, -1.0, 0.3, 8.0])
    def test_symmetry(self, x):
        assert sigmoid(-x) == pytest.approx(1.0 - sigmoid(x), abs=1e-15)

    def test_saturation_against_extended_precision(self):
        getcontext().prec = 50
        ref = Decimal(1) / (Decimal(1) + Decimal(-40).exp())
        assert abs(sigmoid(40.0) - float(ref)) < 1e-12
        assert abs(sigmoid(40.0) - 1.0) < 1e-12

    def test_no_overflow_at_extremes(self):
        with np.errstate(over="raise", invalid="raise"):
            out = sigmoid(np.array([-1000.0, -700.0, 700.0, 1000.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[-1] == 1.0

    @given(arrays(np.float64, 20, elements=st.floats(-700, 700)))
    def test_range(self, x):
        s = sigmoid(x)
        assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))


class TestSoftmax:
    @pytest.mark.parametrize("c", [-3.0, 0.0, 12.5])
    def test_uniform(self, c):
        np.testing.assert_allclose(stable_softmax([c] * 4), [0.25] * 4, atol=1e-15)

    def test_two_entries(self):
        e2 = math.exp(2.0)
        np.testing.assert_allclose(stable_softmax([2.0, 0.0]), [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-15)
        np.testing.assert_allclose(stable_softmax([2.0, 0.0]), [0.88080, 0.11920], atol=1e-5)

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="empty attention support"):
            stable_softmax([])

    def test_large_logits_are_stable(self):
        out = stable_softmax([1000.0, 999.0])
        assert np.all(np.isfinite(out))

    @given(arrays(np.float64, st.integers(1, 12), elements=finite))
    def test_sums_to_one_and_shift_invariant(self, v):
        p = stable_softmax(v)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p > 0)
        np.testing.assert_allclose(stable_softmax(v + 100.0), p, atol=1e-12, rtol=0)

    def test_segment_softmax_matches_per_segment(self, rng):
        lens = [3, 1, 4]
        logits = rng.normal(size=sum(lens))
        starts = np.array([0, 3, 4])
        out = segment_softmax(logits, starts)
        ref = np.concatenate([stable_softmax(logits[0:3]), stable_softmax(logits[3:4]),
                              stable_softmax(logits[4:8])])
        np.testing.assert_allclose(out, ref, atol=1e-15)


class TestCrossEntropy:
    def test_uninformative(self):
        assert binary_cross_entropy(0.5, 1, 1) == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_weight(self):
        for p in (0.01, 0.5, 0.99):
            assert binary_cross_entropy(p, 1, 0) == 0.0

    def test_negative_label(self):
        assert binary_cross_entropy(0.9, 0, 1) == pytest.approx(-math.log(0.1), abs=1e-12)
        assert binary_cross_entropy(0.9, 0, 1) == pytest.approx(2.302585, abs=1e-6)

    def test_clamp_keeps_loss_finite(self):
        assert binary_cross_entropy(0.0, 1) == pytest.approx(-math.log(EPS_CLIP))
        assert np.isfinite(binary_cross_entropy(1.0, 0))

    @given(finite, st.sampled_from([0.0, 1.0]), st.floats(0, 3))
    @settings(max_examples=50)
    def test_logit_derivative(self, z, y, w):
        loss, dz = bce_from_logits(z, y, w)
        assert loss >= 0
        h = 1e-6
        up, _ = bce_from_logits(z + h, y, w)
        down, _ = bce_from_logits(z - h, y, w)
        # finite differences are meaningless right at the clamp boundary
        if abs(sigmoid(z) - 0.5) < 0.5 - 1e-5:
            assert dz == pytest.approx((up - down) / (2 * h), abs=1e-5)


class TestAdam:
    def test_zero_gradient_keeps_param(self):
        p = np.array([1.0, -2.0])
        st_ = AdamState.like(p)
        adam_step(p, np.zeros(2), st_, 0.1)
        np.testing.assert_array_equal(p, [1.0, -2.0])
        assert st_.t == 1

    def test_first_step_by_hand(self):
        p = np.array([0.0])
        adam_step(p, np.array([3.0]), AdamState.like(p), 0.01)
        assert p[0] == pytest.approx(-0.01 * 3 / (math.sqrt(9) + 1e-8), abs=1e-15)
        assert p[0] == pytest.approx(-0.01, abs=1e-9)

    def test_two_steps_against_reference(self):
        def reference(theta, g, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
            m = v = 0.0
            for t in range(1, steps + 1):
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                mh = m / (1 - b1 ** t)
                vh = v / (1 - b2 ** t)
                theta = theta - lr * mh / (math.sqrt(vh) + eps)
            return theta

        p = np.array([0.7, -1.3])
        g = np.array([0.25, -4.0])
        st_ = AdamState.like(p)
        for _ in range(2):
            adam_step(p, g, st_, 0.05)
        for j in range(2):
            assert abs(p[j] - reference([0.7, -1.3][j], g[j], 0.05, 2)) < 1e-12
        assert st_.t == 2 and np.all(st_.v >= 0)

    def test_shape_mismatch(self):
        p = np.zeros((2, 2))
        with pytest.raises(ValueError, match="shape mismatch"):
            adam_step(p, np.zeros(3), AdamState.like(p), 0.1)

    def test_rejects_non_positive_rate(self):
        p = np.zeros(2)
        with pytest.raises(ValueError):
            adam_step(p, np.ones(2), AdamState.like(p), 0.0)


class TestFiniteDifference:
    def test_quadratic_exact(self, rng):
        theta = rng.normal(size=(3, 4))
        err = finite_difference_check(lambda ps: 0.5 * np.sum(ps[0] ** 2), [theta], [theta.copy()])
        assert err < 1e-9

    def test_detects_scaled_gradient(self):
        theta = np.array([[2.0, -3.0], [1.5, 4.0]])
        err = finite_difference_check(lambda ps: 0.5 * np.sum(ps[0] ** 2), [theta], [1.01 * theta])
        assert err == pytest.approx(0.01, rel=1e-4)

    def test_restores_parameters(self, rng):
        theta = rng.normal(size=5)
        before = theta.copy()
        finite_difference_check(lambda ps: float(np.sum(np.sin(ps[0]))), [theta], [np.cos(theta)])
        np.testing.assert_array_equal(theta, before)

    def test_non_deterministic_loss_raises(self):
        noise = np.random.default_rng(0)
        with pytest.raises(RuntimeError, match="not deterministic"):
            finite_difference_check(lambda ps: float(noise.normal()), [np.zeros(2)], [np.zeros(2)])

    def test_coordinate_subsample(self, rng):
        theta = rng.normal(size=50)
        err = finite_difference_check(lambda ps: 0.5 * np.sum(ps[0] ** 2), [theta], [theta.copy()],
                                      max_coords=5, rng=np.random.default_rng(1))
        assert err < 1e-9
