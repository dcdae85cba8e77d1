import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptmwrn.autograd import (
    AdamHyper,
    MissingGradientError,
    NonFiniteError,
    Parameter,
    Tensor,
    adam_step,
    batch_norm,
    channel_concat,
    conv2d,
    elementwise_add,
    finite_diff_check,
    mse_half,
    relu,
    scale,
    tensor_sum,
    weighted_sum,
)

from .conftest import t64


def naive_conv(x, w, b):
    """Direct zero-padded 3x3 correlation, one output pixel at a time."""
    bsz, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((bsz, o, h, wd))
    for n in range(bsz):
        for k in range(o):
            for i in range(h):
                for j in range(wd):
                    out[n, k, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[k]) + b[k]
    return out


class TestConv2d:
    def test_zero_input_passes_bias(self, rng):
        w = t64(rng.standard_normal((2, 1, 3, 3)))
        out = conv2d(t64(np.zeros((1, 1, 4, 4))), w, t64([0.5, -2.0]))
        assert np.all(out.data[0, 0] == 0.5) and np.all(out.data[0, 1] == -2.0)

    def test_identity_kernel(self, rng):
        x = t64(rng.standard_normal((2, 1, 5, 4)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(x, t64(w), t64([0.0])).data, x.data)

    def test_ones_by_hand(self):
        out = conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), t64([0.0])).data[0, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_matches_naive_loop(self, rng):
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(t64(x), t64(w), t64(b)).data
        np.testing.assert_allclose(out, naive_conv(x, w, b), rtol=1e-12, atol=1e-12)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 1, 3, 6, 6))
        w = t64(rng.standard_normal((2, 3, 3, 3)))
        zero = t64(np.zeros(2))
        lhs = conv2d(t64(1.7 * x - 0.3 * y), w, zero).data
        rhs = 1.7 * conv2d(t64(x), w, zero).data - 0.3 * conv2d(t64(y), w, zero).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel"):
            conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64([0.0]))

    def test_empty_spatial(self):
        with pytest.raises(ValueError):
            conv2d(t64(np.zeros((1, 1, 0, 4))), t64(np.zeros((1, 1, 3, 3))), t64([0.0]))

    def test_gradients(self, rng):
        x = t64(rng.standard_normal((2, 2, 4, 5)), True)
        w = t64(rng.standard_normal((3, 2, 3, 3)), True)
        b = t64(rng.standard_normal(3), True)
        probe = rng.standard_normal((2, 3, 4, 5))
        report = finite_diff_check(lambda x, w, b: weighted_sum(conv2d(x, w, b), probe), [x, w, b])
        assert report.passed, report


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(t64([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert not relu(t64(-np.ones((2, 3)))).data.any()

    def test_subgradient(self):
        x = t64([-1.0, 2.0, 0.0], True)
        tensor_sum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 0])


class TestBatchNorm:
    def stats(self, c):
        return t64(np.zeros(c)), t64(np.ones(c))

    def test_training_two_values(self):
        x = t64(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        rm, rv = self.stats(1)
        out = batch_norm(x, t64([1.0]), t64([0.0]), rm, rv, training=True).data.ravel()
        # mean 2, population variance 1, eps 1e-4
        expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-4)
        np.testing.assert_allclose(out, expected, rtol=1e-15)
        np.testing.assert_allclose(out, [-0.99995, 0.99995], atol=1e-8)

    def test_running_stats_decay(self):
        x = t64(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        rm, rv = self.stats(1)
        batch_norm(x, t64([1.0]), t64([0.0]), rm, rv, training=True)
        np.testing.assert_allclose(rm.data, [0.2])
        np.testing.assert_allclose(rv.data, [0.9 + 0.1 * 1.0])

    def test_eval_identity(self, rng):
        x = t64(rng.standard_normal((2, 3, 4, 4)))
        rm, rv = self.stats(3)
        out = batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), rm, rv, training=False).data
        np.testing.assert_allclose(out, x.data / np.sqrt(1 + 1e-4))

    def test_eval_affine(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        g, b = rng.standard_normal(3), rng.standard_normal(3)
        mu, var = rng.standard_normal(3), rng.random(3) + 0.5
        out = batch_norm(t64(x), t64(g), t64(b), t64(mu), t64(var), training=False).data
        s = (1, 3, 1, 1)
        expected = g.reshape(s) * (x - mu.reshape(s)) / np.sqrt(var.reshape(s) + 1e-4) + b.reshape(s)
        np.testing.assert_allclose(out, expected, rtol=1e-13)

    def test_gamma_zero(self, rng):
        x = t64(rng.standard_normal((2, 2, 3, 3)))
        rm, rv = self.stats(2)
        out = batch_norm(x, t64(np.zeros(2)), t64([0.3, -1.0]), rm, rv, training=True).data
        assert np.all(out[:, 0] == 0.3) and np.all(out[:, 1] == -1.0)

    def test_needs_two_values(self):
        rm, rv = self.stats(1)
        with pytest.raises(ValueError):
            batch_norm(t64(np.ones((1, 1, 1, 1))), t64([1.0]), t64([0.0]), rm, rv, training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = t64(rng.standard_normal((2, 3, 3, 3)), True)
        g = t64(rng.standard_normal(3), True)
        b = t64(rng.standard_normal(3), True)
        rm, rv = t64(rng.standard_normal(3)), t64(rng.random(3) + 0.5)
        probe = rng.standard_normal((2, 3, 3, 3))
        report = finite_diff_check(
            lambda x, g, b: weighted_sum(batch_norm(x, g, b, rm, rv, training), probe), [x, g, b]
        )
        assert report.max_rel_error < 1e-5, report


class TestConcatAdd:
    def test_concat_shapes(self):
        out = channel_concat(t64(np.zeros((1, 2, 4, 4))), t64(np.ones((1, 3, 4, 4))))
        assert out.shape == (1, 5, 4, 4)
        assert not out.data[:, :2].any() and out.data[:, 2:].all()

    def test_concat_zero_channels(self, rng):
        a = t64(rng.standard_normal((1, 2, 4, 4)))
        np.testing.assert_array_equal(channel_concat(a, t64(np.zeros((1, 0, 4, 4)))).data, a.data)

    def test_concat_backward(self):
        a = t64(np.zeros((1, 2, 2, 2)), True)
        b = t64(np.zeros((1, 1, 2, 2)), True)
        tensor_sum(channel_concat(a, b)).backward()
        assert np.all(a.grad == 1) and np.all(b.grad == 1)

    def test_concat_mismatch(self):
        with pytest.raises(ValueError):
            channel_concat(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 2, 4))))

    def test_add(self, rng):
        a = t64(rng.standard_normal((1, 2, 3, 3)), True)
        b = t64(rng.standard_normal((1, 2, 3, 3)), True)
        np.testing.assert_array_equal(elementwise_add(a, t64(np.zeros(a.shape))).data, a.data)
        assert not elementwise_add(a, t64(-a.data)).data.any()
        tensor_sum(elementwise_add(a, b)).backward()
        assert np.all(a.grad == 1) and np.all(b.grad == 1)
        with pytest.raises(ValueError):
            elementwise_add(a, t64(np.zeros((1, 2, 3, 2))))


class TestMseHalf:
    def test_zero(self, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        assert float(mse_half(t64(x), t64(x)).data) == 0.0

    def test_value_and_gradient(self):
        pred = t64(np.array([1.0, 2.0]).reshape(1, 1, 1, 2), True)
        loss = mse_half(pred, t64(np.zeros((1, 1, 1, 2))))
        assert float(loss.data) == 2.5
        loss.backward()
        np.testing.assert_array_equal(pred.grad.ravel(), [1.0, 2.0])

    def test_batch_normalization(self):
        pred = t64(np.ones((4, 1, 2, 2)), True)
        loss = mse_half(pred, t64(np.zeros((4, 1, 2, 2))))
        assert float(loss.data) == pytest.approx(0.5 * 16 / 4)
        loss.backward()
        np.testing.assert_allclose(pred.grad, 0.25)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            mse_half(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 2, 3))))

    def test_gradcheck(self, rng):
        target = t64(rng.standard_normal((2, 2, 3, 3)))
        pred = t64(rng.standard_normal((2, 2, 3, 3)), True)
        report = finite_diff_check(lambda p: mse_half(p, target), [pred], step=1e-5)
        assert report.max_rel_error < 1e-6


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (vh**0.5 + eps)
    return theta


class TestAdam:
    def test_first_step(self):
        p = Parameter("theta", np.zeros(1), dtype=np.float64)
        p.grad = np.ones(1)
        adam_step([p], AdamHyper(lr=1e-3))
        assert p.data[0] == pytest.approx(-9.99999990e-4, rel=1e-9)
        assert p.step_count == 1 and p.grad is None

    def test_two_steps_match_scalar_oracle(self):
        p = Parameter("theta", np.zeros(1), dtype=np.float64)
        for _ in range(2):
            p.grad = np.ones(1)
            adam_step([p], AdamHyper(lr=1e-3))
        assert abs(p.data[0] - scalar_adam(0.0, [1.0, 1.0], 1e-3)) < 1e-12

    def test_quadratic_two_steps(self):
        # f(theta) = 0.5 * (theta - 3)^2, gradient theta - 3
        p = Parameter("theta", np.array([0.5]), dtype=np.float64)
        grads = []
        theta = 0.5
        for _ in range(2):
            p.grad = p.data - 3.0
            grads.append(float(p.grad[0]))
            adam_step([p], AdamHyper(lr=0.1))
        # replay the oracle with the same gradient sequence
        assert abs(p.data[0] - scalar_adam(theta, grads, 0.1)) < 1e-12

    def test_zero_gradient_noop(self, rng):
        init = rng.standard_normal((3, 3))
        p = Parameter("w", init.copy(), dtype=np.float64)
        for _ in range(5):
            p.grad = np.zeros_like(init)
            adam_step([p], AdamHyper())
        np.testing.assert_array_equal(p.data, init)

    def test_missing_gradient(self):
        with pytest.raises(MissingGradientError):
            adam_step([Parameter("w", np.zeros(2))], AdamHyper())

    def test_hyper_validation(self):
        assert AdamHyper() == AdamHyper(1e-3, 0.9, 0.999, 1e-8)
        with pytest.raises(ValueError):
            AdamHyper(beta1=1.0)
        with pytest.raises(ValueError):
            AdamHyper(lr=0)


class TestFiniteDiff:
    def test_linear_exact(self, rng):
        w = rng.standard_normal((1, 2, 3, 3))
        x = t64(rng.standard_normal((1, 2, 3, 3)), True)
        report = finite_diff_check(lambda x: weighted_sum(scale(x, 2.5), w), [x], step=1e-3)
        assert report.max_rel_error < 1e-9

    def test_conv_relu_chain(self, rng):
        x = t64(rng.standard_normal((1, 2, 5, 5)), True)
        w = t64(rng.standard_normal((3, 2, 3, 3)), True)
        b = t64(rng.standard_normal(3), True)
        report = finite_diff_check(lambda x, w, b: tensor_sum(relu(conv2d(x, w, b))), [x, w, b])
        assert report.max_rel_error < 1e-5
        assert report.checked > 0

    def test_detects_wrong_gradient(self, rng):
        from ptmwrn.autograd import make_result

        def bad_square(t):
            return make_result(t.data**2, (t,), lambda g: (g * t.data,), "bad")

        x = t64(rng.standard_normal(4) + 2.0, True)
        assert not finite_diff_check(lambda x: tensor_sum(bad_square(x)), [x]).passed

    def test_requires_float64(self):
        with pytest.raises(ValueError):
            finite_diff_check(tensor_sum, [Tensor(np.ones(3, dtype=np.float32), True)])

    def test_non_finite(self):
        x = t64([np.inf], True)
        with pytest.raises(NonFiniteError):
            finite_diff_check(tensor_sum, [x])


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(2, 5),
    st.integers(2, 5),
    st.integers(0, 2**31 - 1),
)
def test_conv_gradient_property(batch, channels, h, w, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.standard_normal((batch, channels, h, w)), True)
    k = t64(rng.standard_normal((2, channels, 3, 3)), True)
    b = t64(rng.standard_normal(2), True)
    probe = rng.standard_normal((batch, 2, h, w))
    report = finite_diff_check(lambda x, k, b: weighted_sum(conv2d(x, k, b), probe), [x, k, b])
    assert report.max_rel_error < 1e-5


def test_checked_mode_catches_nan():
    with pytest.raises(NonFiniteError):
        elementwise_add(t64([np.nan]), t64([1.0]))
