import copy
import math

import numpy as np
import pytest

from modalbench import numerics as N
from modalbench.errors import ConfigError, DimensionError, NumericError
from modalbench.rng import Rng


class TestAffine:
    def test_identity(self):
        x = np.array([[1.0, 2.0]])
        y = N.affine(x, np.eye(2), np.zeros(2))
        assert np.allclose(y, [[1.0, 2.0]])

    def test_hand_computed(self):
        # 1*2 + (-1)*3 + 1 = 0
        y = N.affine(np.array([[1.0, -1.0]]), np.array([[2.0], [3.0]]),
                     np.array([1.0]))
        assert np.allclose(y, [[0.0]])

    def test_zero_input_rows_equal_bias(self):
        x = np.zeros((3, 4))
        w = Rng(0).normal((4, 2))
        b = np.array([5.0, -1.0])
        y = N.affine(x, w, b)
        assert np.allclose(y, np.tile(b, (3, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            N.affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
        with pytest.raises(DimensionError):
            N.affine(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(3))

    def test_nonfinite_output_rejected(self):
        x = np.array([[1e300]])
        w = np.array([[1e300]])
        with pytest.raises(NumericError):
            N.affine(x, w, np.zeros(1))


class TestRelu:
    def test_sign_cases(self):
        assert np.allclose(N.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_positive_identity(self):
        x = np.array([0.5, 3.0, 7.0])
        assert np.array_equal(N.relu(x), x)

    def test_backward_indicator(self):
        pre = np.array([-1.0, 2.0])
        up = np.array([1.0, 1.0])
        assert np.allclose(N.relu_backward(pre, up), [0.0, 1.0])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_loss_is_log_c(self):
        logits = np.zeros((4, 3))
        labels = np.array([0, 1, 2, 0])
        loss, _ = N.softmax_cross_entropy(logits, labels)
        assert abs(loss - math.log(3)) < 1e-7

    def test_binary_grad_hand_case(self):
        # B=1, logits [0, 0], label 0 -> p = (0.5, 0.5), grad = [-0.5, 0.5]
        loss, grad = N.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
        assert np.allclose(grad, [[-0.5, 0.5]])

    def test_saturated_true_class(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        loss, _ = N.softmax_cross_entropy(logits, np.array([2]))
        assert loss < 1e-6

    def test_loss_nonnegative_and_rows_sum_zero(self):
        rng = Rng(3)
        logits = rng.normal((6, 5)) * 4
        labels = rng.integers(5, 6)
        loss, grad = N.softmax_cross_entropy(logits, labels)
        assert loss >= 0.0
        assert np.all(np.abs(grad.sum(axis=1)) <= 1e-7)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            N.softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))

    def test_stability_under_large_logits(self):
        logits = np.full((2, 3), 1000.0)
        loss, grad = N.softmax_cross_entropy(logits, np.array([0, 1]))
        assert math.isfinite(loss)


class TestAdam:
    def _state(self, lr=0.1, wd=0.0):
        return N.OptimizerState(kind="adam", lr=lr, weight_decay=wd)

    def test_zero_gradient_is_fixed_point(self):
        p = [np.ones((2, 2))]
        state = self._state()
        for _ in range(5):
            N.adam_step(p, [np.zeros((2, 2))], state)
        assert np.allclose(p[0], 1.0)

    def test_first_step_magnitude_is_lr_sign(self):
        p = [np.zeros(3)]
        g = [np.array([0.5, -2.0, 1e-3])]
        state = self._state(lr=0.1)
        N.adam_step(p, g, state)
        assert np.allclose(p[0], [-0.1, 0.1, -0.1], atol=1e-4)

    def test_replay_bit_identical(self):
        rng = Rng(5)
        p1 = [rng.normal((3, 4)).astype(np.float32)]
        grads = [rng.normal((3, 4)).astype(np.float32) for _ in range(10)]
        p2 = [p1[0].copy()]
        s1 = self._state(wd=0.01)
        s2 = self._state(wd=0.01)
        for g in grads:
            N.adam_step(p1, [g], s1)
        for g in grads:
            N.adam_step(p2, [g], s2)
        assert np.array_equal(p1[0], p2[0])

    def test_wrong_kind_rejected(self):
        state = N.OptimizerState(kind="sgd", lr=0.1)
        with pytest.raises(ConfigError):
            N.adam_step([np.zeros(1)], [np.zeros(1)], state)

    def test_shape_mismatch(self):
        state = self._state()
        with pytest.raises(DimensionError):
            N.adam_step([np.zeros(2)], [np.zeros(3)], state)


class TestSgdMomentum:
    def test_plain_sgd_when_momentum_zero(self):
        p = [np.array([1.0, 1.0])]
        g = [np.array([0.5, -0.5])]
        state = N.OptimizerState(kind="sgd", lr=0.1, momentum=0.0)
        N.sgd_momentum_step(p, g, state)
        assert np.allclose(p[0], [0.95, 1.05])

    def test_velocity_accumulates(self):
        p = [np.zeros(1)]
        state = N.OptimizerState(kind="sgd", lr=1.0, momentum=0.5)
        N.sgd_momentum_step(p, [np.ones(1)], state)   # v=1, p=-1
        N.sgd_momentum_step(p, [np.ones(1)], state)   # v=1.5, p=-2.5
        assert np.allclose(p[0], [-2.5])

    def test_constant_loss_reduces_lr_exactly_once_after_patience(self):
        p = [np.zeros(1)]
        state = N.OptimizerState(kind="sgd", lr=1.0, momentum=0.0,
                                 plateau_patience=70)
        for _ in range(71):
            N.sgd_momentum_step(p, [np.zeros(1)], state, loss=1.0)
        assert state.lr == pytest.approx(0.5)
        N.sgd_momentum_step(p, [np.zeros(1)], state, loss=1.0)
        assert state.lr == pytest.approx(0.5)  # counter was reset

    def test_improving_loss_never_decays(self):
        state = N.OptimizerState(kind="sgd", lr=1.0, plateau_patience=3)
        p = [np.zeros(1)]
        loss = 10.0
        for _ in range(50):
            N.sgd_momentum_step(p, [np.zeros(1)], state, loss=loss)
            loss *= 0.9
        assert state.lr == 1.0

    def test_replay_bit_identical(self):
        rng = Rng(5)
        p1 = [rng.normal(6).astype(np.float32)]
        p2 = [p1[0].copy()]
        grads = [rng.normal(6).astype(np.float32) for _ in range(8)]
        s1 = N.OptimizerState(kind="sgd", lr=0.01, momentum=0.9,
                              weight_decay=1e-4, plateau_patience=3)
        s2 = copy.deepcopy(s1)
        for g in grads:
            N.sgd_momentum_step(p1, [g], s1, loss=1.0)
            N.sgd_momentum_step(p2, [g], s2, loss=1.0)
        assert np.array_equal(p1[0], p2[0])
        assert s1.lr == s2.lr


class TestFiniteDifferences:
    def test_quadratic(self):
        grad = N.finite_difference_gradient(lambda v: float(v[0] ** 2),
                                            np.array([3.0]), eps=1e-5)
        assert abs(grad[0] - 6.0) <= 1e-8

    def test_constant_function(self):
        grad = N.finite_difference_gradient(lambda v: 1.0, np.zeros(4))
        assert np.allclose(grad, 0.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            N.finite_difference_gradient(lambda v: float("nan"), np.zeros(1))
