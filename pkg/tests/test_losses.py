import inspect

import numpy as np
import pytest

from conftest import rel_err
from vnetseg.losses import (
    ClassWeights,
    DICE_EPS,
    dice_backward,
    dice_forward,
    dice_loss_op,
    weighted_logistic,
    weighted_logistic_op,
)
from vnetseg.tensor import Tape, Tensor5, backward


def fd_dice(p, g, j, h=1e-3):
    q = p.copy()
    q[j] = p[j] + h
    fp = dice_forward(q, g).dice
    q[j] = p[j] - h
    fm = dice_forward(q, g).dice
    return (fp - fm) / (2 * h)


class TestDiceForward:
    def test_perfect_overlap(self, rng):
        g = (rng.random(64) < 0.4).astype(float)
        g[0] = 1.0
        r = dice_forward(g, g)
        assert r.dice == 1.0
        assert r.loss == 0.0

    def test_disjoint(self):
        p = np.array([1.0, 1.0, 0.0, 0.0])
        g = np.array([0.0, 0.0, 1.0, 1.0])
        assert dice_forward(p, g).dice <= 1e-6

    def test_half_probabilities(self):
        # (2 * 0.5) / (0.5 + 1) = 2/3
        r = dice_forward(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
        assert abs(r.dice - 0.6667) < 1e-4
        assert abs(r.loss - (1 - 0.6667)) < 1e-4

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            dice_forward(np.ones(3), np.ones(4))

    def test_probability_range_checked(self):
        with pytest.raises(ValueError):
            dice_forward(np.array([1.5, 0.0]), np.array([1.0, 0.0]))

    def test_dice_in_unit_interval(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 128))
            p = rng.random(n)
            g = (rng.random(n) < rng.random()).astype(float)
            d = dice_forward(p, g).dice
            assert 0.0 <= d <= 1.0

    def test_symmetry_for_binary_p(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 64))
            p = (rng.random(n) < 0.5).astype(float)
            g = (rng.random(n) < 0.5).astype(float)
            assert dice_forward(p, g).dice == pytest.approx(dice_forward(g, p).dice, abs=1e-12)

    def test_equals_set_counting_for_binary_p(self, rng):
        for _ in range(50):
            n = int(rng.integers(4, 100))
            p = (rng.random(n) < 0.4).astype(float)
            g = (rng.random(n) < 0.4).astype(float)
            inter = int((p * g).sum())
            total = int(p.sum() + g.sum())
            expected = 1.0 if total == 0 else 2.0 * inter / total
            assert abs(dice_forward(p, g).dice - expected) < 1e-5

    def test_no_class_weight_parameter(self):
        # the Dice objective needs no re-weighting; its signature admits none
        for fn in (dice_forward, dice_backward):
            params = inspect.signature(fn).parameters
            assert set(params) == {"p", "g"}


class TestDiceBackward:
    def test_hand_computed_values(self):
        p = np.array([0.5, 0.5])
        g = np.array([1.0, 0.0])
        grad = dice_backward(p, g)
        # 2*(1*1.5 - 0.5*1.0)/1.5^2 and 2*(0*1.5 - 0.5*1.0)/1.5^2
        assert abs(grad[0] - 0.8889) < 1e-3
        assert abs(grad[1] - (-0.4444)) < 1e-3

    def test_matches_finite_differences(self, rng):
        worst = 0.0
        for case in range(30):
            n = int(rng.integers(8, 64))
            p = rng.uniform(0.05, 0.95, n)
            g = (rng.random(n) < 0.5).astype(float)
            grad = dice_backward(p, g)
            for j in rng.choice(n, size=min(8, n), replace=False):
                worst = max(worst, rel_err(grad[j], fd_dice(p, g, int(j))).max())
        assert worst < 1e-6

    def test_p_equals_g_gradient(self, rng):
        # near the binary fixed point the gradient almost vanishes; probe at
        # p clipped just inside [0, 1] so the FD evaluations stay legal
        h = 1e-3
        g = (rng.random(27) < 0.5).astype(float)
        g[:3] = 1.0
        p = np.clip(g, h, 1.0 - h)
        grad = dice_backward(p, g)
        for j in range(g.size):
            fd = fd_dice(p, g, j, h=h)
            assert abs(grad[j] - fd) < 1e-6 * max(1.0, abs(grad[j]))

    def test_empty_prediction_empty_truth(self):
        p = np.zeros(32)
        g = np.zeros(32)
        assert dice_forward(p, g).dice == 1.0
        np.testing.assert_array_equal(dice_backward(p, g), np.zeros(32))

    def test_forward_grad_field_matches_backward(self, rng):
        p = rng.uniform(0.1, 0.9, 50)
        g = (rng.random(50) < 0.3).astype(float)
        np.testing.assert_array_equal(dice_forward(p, g).grad, dice_backward(p, g))


class TestWeightedLogistic:
    def test_one_hot_correct_gives_zero_loss(self):
        g = np.array([0, 1, 1, 0])
        p = np.zeros((2, 4))
        p[g, np.arange(4)] = 1.0
        loss, _ = weighted_logistic(p, g, ClassWeights(1.0, 1.0))
        assert loss == 0.0

    def test_uniform_half_gives_ln2(self):
        g = np.array([0, 1, 0, 1, 1])
        p = np.full((2, 5), 0.5)
        loss, _ = weighted_logistic(p, g, ClassWeights(1.0, 1.0))
        assert abs(loss - np.log(2.0)) < 1e-12

    def test_reweighting_balances_contributions(self):
        # 1% foreground, w_fg=99, w_bg=1, uniform p: each class carries ~50%
        n = 10000
        g = np.zeros(n)
        g[:100] = 1.0
        p = np.full((2, n), 0.5)
        w = ClassWeights(1.0, 99.0)
        loss, _ = weighted_logistic(p, g, w)
        fg_direct = 100 * 99.0 * -np.log(0.5) / n
        bg_direct = 9900 * 1.0 * -np.log(0.5) / n
        assert abs(loss - (fg_direct + bg_direct)) < 1e-12
        assert abs(fg_direct / loss - 0.5) < 0.001

    def test_gradient_matches_fd_through_softmax(self, rng):
        n = 40
        z = rng.standard_normal((2, n))
        g = (rng.random(n) < 0.3).astype(int)
        w = ClassWeights(0.7, 2.5)

        def softmax(zq):
            e = np.exp(zq - zq.max(axis=0, keepdims=True))
            return e / e.sum(axis=0, keepdims=True)

        _, grad = weighted_logistic(softmax(z), g, w)
        h = 1e-5
        for c in range(2):
            for j in rng.choice(n, size=10, replace=False):
                zq = z.copy()
                zq[c, j] += h
                fp = weighted_logistic(softmax(zq), g, w)[0]
                zq[c, j] -= 2 * h
                fm = weighted_logistic(softmax(zq), g, w)[0]
                fd = (fp - fm) / (2 * h)
                assert rel_err(grad[c, j], fd, floor=1e-9).max() < 1e-4

    def test_saturated_probability_clamped(self):
        g = np.array([1, 0])
        p = np.array([[1.0, 1.0], [0.0, 0.0]])  # true class has probability 0 at voxel 0
        loss, grad = weighted_logistic(p, g, ClassWeights(1.0, 5.0))
        assert np.isfinite(loss)
        assert np.isfinite(grad).all()

    def test_class_weight_validation(self):
        with pytest.raises(ValueError):
            ClassWeights(0.0, 0.0)
        with pytest.raises(ValueError):
            ClassWeights(-1.0, 1.0)

    def test_inverse_frequency(self):
        g = np.zeros(100)
        g[:10] = 1
        w = ClassWeights.inverse_frequency(g)
        assert w.w_foreground == pytest.approx(100 / 20)
        assert w.w_background == pytest.approx(100 / 180)


class TestLossOps:
    def test_dice_loss_op_matches_per_volume_mean(self, rng):
        probs_v = rng.uniform(0.05, 0.95, (2, 2, 4, 4, 4))
        probs_v[:, 0] = 1 - probs_v[:, 1]
        labels = (rng.random((2, 4, 4, 4)) < 0.4).astype(np.uint8)
        probs = Tensor5(probs_v, requires_grad=True)
        tape = Tape()
        loss = dice_loss_op(probs, labels, tape)
        expected = np.mean(
            [dice_forward(probs_v[i, 1].ravel(), labels[i].ravel()).loss for i in range(2)]
        )
        assert loss.values.ravel()[0] == pytest.approx(expected, abs=1e-14)
        backward(tape, loss)
        # gradient flows only into the foreground channel, scaled by -1/B
        assert np.all(probs.grad[:, 0] == 0)
        g0 = dice_backward(probs_v[0, 1].ravel(), labels[0].ravel()).reshape(4, 4, 4)
        np.testing.assert_allclose(probs.grad[0, 1], -g0 / 2, atol=1e-14)

    def test_weighted_logistic_op_gradient_matches_fd(self, rng):
        z_v = rng.standard_normal((1, 2, 3, 3, 3))
        labels = (rng.random((1, 3, 3, 3)) < 0.5).astype(np.uint8)
        w = ClassWeights(1.0, 3.0)
        logits = Tensor5(z_v, requires_grad=True)
        tape = Tape()
        loss = weighted_logistic_op(logits, labels, w, tape)
        backward(tape, loss)

        def loss_of(zq):
            t = Tape()
            lt = weighted_logistic_op(Tensor5(zq), labels, w, t)
            return float(lt.values.ravel()[0])

        h = 1e-5
        flat = z_v.copy()
        for idx in rng.choice(flat.size, size=12, replace=False):
            orig = flat.ravel()[idx]
            flat.ravel()[idx] = orig + h
            fp = loss_of(flat)
            flat.ravel()[idx] = orig - h
            fm = loss_of(flat)
            flat.ravel()[idx] = orig
            fd = (fp - fm) / (2 * h)
            assert rel_err(logits.grad.ravel()[idx], fd, floor=1e-9).max() < 1e-4
