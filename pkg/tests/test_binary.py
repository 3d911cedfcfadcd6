"""Binarization math: decomposition, losses, update rules, and gradient
fidelity against the finite-difference oracle."""

import numpy as np
import pytest

from bnas import binary
from bnas.binary import BinarizedKernel
from bnas.errors import NumericsError, ShapeError

from conftest import binarized_grad_fd_errors, make_test_kernel


def kernel_from(x, a_value, mode="pcnn", theta=0.0):
    x = np.asarray(x, dtype=np.float64)
    a = np.full(x.shape[1:], a_value, dtype=np.float64)
    return BinarizedKernel(x=x, a=a, mode=mode, theta=theta)


class TestBinarize:
    def test_direct_evaluation(self):
        k = kernel_from(np.array([0.5, -0.3]).reshape(1, 1, 1, 2), 0.4)
        np.testing.assert_allclose(binary.binarize(k).reshape(-1), [0.4, -0.4])
        np.testing.assert_allclose(k.x.reshape(-1), [0.5, -0.3])  # X untouched

    def test_all_positive_uniform(self, rng):
        x = rng.uniform(0.1, 1.0, (2, 2, 3, 3))
        k = kernel_from(x, 0.7)
        np.testing.assert_allclose(binary.binarize(k), 0.7)

    def test_xnor_closed_form(self):
        k = kernel_from(np.array([1.0, -3.0]).reshape(1, 1, 1, 2), 0.0, mode="xnor")
        xhat = binary.binarize(k)
        assert k.a_hat == 2.0
        np.testing.assert_allclose(xhat.reshape(-1), [2.0, -2.0])

    def test_xnor_closed_form_after_every_forward(self, rng):
        k = make_test_kernel(rng, (3, 2, 3, 3), "xnor", theta=1e-2)
        k.x += rng.standard_normal(k.x.shape) * 0.01
        binary.binarize(k)
        assert abs(k.a_hat - np.abs(k.x).mean()) < 1e-6

    def test_values_in_two_point_set(self, rng):
        k = make_test_kernel(rng, (2, 3, 3, 3), "pcnn", theta=0.0)
        xhat = binary.binarize(k)
        np.testing.assert_allclose(np.abs(xhat), k.a_hat)

    def test_sign_zero_is_plus_one(self):
        assert binary.sign(np.array([0.0]))[0] == 1.0

    def test_nonfinite_kernel_rejected(self):
        k = kernel_from(np.ones((1, 1, 1, 1)), 1.0)
        k.x[0, 0, 0, 0] = np.inf
        with pytest.raises(NumericsError):
            binary.binarize(k)


class TestAmplitudeLoss:
    def test_perfect_reconstruction_is_zero(self):
        k = kernel_from(np.array([0.5, -0.5]).reshape(1, 1, 1, 2), 0.5, theta=3.0)
        assert binary.amplitude_loss(k) == 0.0

    def test_theta_zero_disables(self, rng):
        k = make_test_kernel(rng, (2, 2, 2, 2), "pcnn", theta=0.0)
        assert binary.amplitude_loss(k) == 0.0

    def test_hand_evaluation(self):
        k = kernel_from(np.array([1.0, -1.0]).reshape(1, 1, 1, 2), 0.5, theta=2.0)
        assert binary.amplitude_loss(k) == pytest.approx(0.5)


class TestClassificationLoss:
    def test_perfect_fit(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert binary.classification_loss(y, y) == 0.0

    def test_hand_evaluation(self):
        out = np.array([[1.0, 0.0]])
        tgt = np.array([[0.0, 1.0]])
        assert binary.classification_loss(out, tgt) == pytest.approx(1.0)

    def test_duplication_invariance(self, rng):
        out = rng.standard_normal((4, 3))
        tgt = np.eye(3)[rng.integers(0, 3, 4)]
        single = binary.classification_loss(out, tgt)
        double = binary.classification_loss(np.vstack([out, out]), np.vstack([tgt, tgt]))
        assert double == pytest.approx(single)

    def test_backward_is_exact(self, rng):
        out = rng.standard_normal((3, 4))
        tgt = np.eye(4)[rng.integers(0, 4, 3)]
        g = binary.classification_loss_backward(out, tgt)
        np.testing.assert_allclose(g, (out - tgt) / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            binary.classification_loss(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_cross_entropy_option(self, rng):
        out = rng.standard_normal((4, 3))
        tgt = np.eye(3)[rng.integers(0, 3, 4)]
        loss = binary.cross_entropy_loss(out, tgt)
        assert loss > 0
        g = binary.cross_entropy_loss_backward(out, tgt)
        assert g.shape == out.shape


class TestLossTerms:
    def test_total_is_exact_sum(self, rng):
        for _ in range(20):
            a, b = float(rng.random()), float(rng.random())
            terms = binary.LossTerms(data=a, amplitude=b)
            assert terms.total == a + b


class TestGradKernel:
    def test_window_closed_outside_unit_box(self):
        k = kernel_from(np.array([1.5, -2.0]).reshape(1, 1, 1, 2), 1.0, theta=0.0)
        g = np.ones_like(k.x)
        assert not binary.grad_kernel(k, g).any()

    def test_pass_through_inside_window(self, rng):
        k = make_test_kernel(rng, (2, 2, 2, 2), "pcnn", theta=0.0)
        k.a[...] = 1.0
        g = rng.standard_normal(k.x.shape)
        np.testing.assert_array_equal(binary.grad_kernel(k, g), g)

    def test_matches_finite_differences(self, rng):
        k = make_test_kernel(rng, (1, 1, 2, 2), "pcnn", theta=1e-2)
        inp = rng.standard_normal((2, 1, 4, 4))
        # conv output for a 4x4 input and 2x2 kernel is 3x3; dense targets
        # exercise the squared loss fully
        targets = rng.standard_normal((2, 1, 3, 3))
        err_x, _ = binarized_grad_fd_errors(k, inp, targets)
        assert err_x < 1e-3


class TestGradAmplitude:
    def test_stationary_point(self):
        k = kernel_from(np.array([0.5, -0.5]).reshape(1, 1, 1, 2), 0.5, theta=2.0)
        assert not binary.grad_amplitude(k, np.zeros_like(k.x)).any()

    def test_single_positive_direction_pass_through(self):
        k = kernel_from(np.array([[[[0.3]]]]), 0.3, theta=0.0)
        g = np.array([[[[1.7]]]])
        np.testing.assert_allclose(binary.grad_amplitude(k, g), [[[1.7]]])

    def test_matches_finite_differences(self, rng):
        k = make_test_kernel(rng, (2, 1, 2, 2), "pcnn", theta=1e-2)
        inp = rng.standard_normal((2, 1, 4, 4))
        targets = rng.standard_normal((2, 2, 3, 3))
        _, err_a = binarized_grad_fd_errors(k, inp, targets)
        assert err_a < 1e-3


class TestUpdateParams:
    def test_zero_step_keeps_kernel(self, rng):
        k = make_test_kernel(rng, (2, 2, 2, 2), "pcnn", theta=1e-2)
        x0, a0 = k.x.copy(), k.a.copy()
        binary.update_params(k, np.zeros_like(k.x), np.zeros_like(k.a), eta1=0.1, eta2=0.1)
        np.testing.assert_array_equal(k.x, x0)
        np.testing.assert_array_equal(k.a, a0)

    def test_absolute_value_flips_negative_amplitude(self):
        k = kernel_from(np.array([[[[0.2]]]]), 0.1)
        binary.update_params(k, np.zeros_like(k.x), np.array([[[0.2]]]), eta1=1.0, eta2=1.0)
        np.testing.assert_allclose(k.a, 0.1)

    def test_amplitudes_stay_non_negative(self, rng):
        k = make_test_kernel(rng, (2, 2, 3, 3), "pcnn", theta=1e-2)
        for _ in range(50):
            dx = rng.standard_normal(k.x.shape)
            da = rng.standard_normal(k.a.shape)
            binary.update_params(k, dx, da, eta1=0.05, eta2=0.5)
            assert k.a.min() >= 0.0

    def test_xnor_recomputes_closed_form(self, rng):
        k = make_test_kernel(rng, (2, 2, 2, 2), "xnor", theta=0.0)
        binary.update_params(k, rng.standard_normal(k.x.shape), np.zeros_like(k.a), 0.05, 0.05)
        assert abs(k.a_hat - np.abs(k.x).mean()) < 1e-12


class TestReconstructionConvergence:
    @pytest.mark.parametrize("mode", ["xnor", "pcnn"])
    def test_amplitude_loss_monotone_under_updates(self, mode, rng):
        """With no data term, the update rules alone drive the reconstruction
        residual down."""
        k = make_test_kernel(rng, (3, 2, 3, 3), mode, theta=1.0)
        zero_g = np.zeros_like(k.x)
        prev = binary.amplitude_loss(k)
        for _ in range(100):
            dx = binary.grad_kernel(k, zero_g)
            da = binary.grad_amplitude(k, zero_g)
            binary.update_params(k, dx, da, eta1=0.05, eta2=0.05)
            cur = binary.amplitude_loss(k)
            assert cur <= prev + 1e-12
            prev = cur


class TestBinarizeActivation:
    def test_signs_with_zero_convention(self):
        y, _ = binary.binarize_activation(np.array([-0.2, 0.0, 3.0]))
        np.testing.assert_array_equal(y, [-1.0, 1.0, 1.0])

    def test_backward_window(self):
        x = np.array([-2.0, -0.5, 0.5, 2.0])
        _, cache = binary.binarize_activation(x)
        g = binary.binarize_activation_backward(cache, np.ones_like(x))
        np.testing.assert_array_equal(g, [0.0, 1.0, 1.0, 0.0])

    def test_idempotent(self, rng):
        x = rng.standard_normal(16)
        once, _ = binary.binarize_activation(x)
        twice, _ = binary.binarize_activation(once)
        np.testing.assert_array_equal(once, twice)


def test_invalid_mode_rejected():
    with pytest.raises(ShapeError):
        kernel_from(np.ones((1, 1, 1, 1)), 1.0, mode="ternary")


def test_negative_amplitude_rejected():
    x = np.ones((1, 1, 1, 1))
    with pytest.raises(NumericsError):
        BinarizedKernel(x=x, a=np.full((1, 1, 1), -0.5), mode="pcnn")
