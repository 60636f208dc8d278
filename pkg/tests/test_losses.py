import math

import numpy as np
import pytest

from danet.losses import (
    CROSS_ENTROPY,
    FocalParams,
    box_regression_loss,
    cross_entropy,
    focal_loss,
    focal_loss_pt,
    sigmoid_focal_loss,
    smooth_l1_loss,
)
from danet.tensor import Tensor


def test_cross_entropy_examples():
    assert abs(cross_entropy(0.5, 1) - math.log(2)) <= 1e-15
    assert abs(cross_entropy(0.5, 0) - math.log(2)) <= 1e-15
    assert abs(cross_entropy(0.2, 0) - 0.223144) <= 1e-6
    assert cross_entropy(1 - 1e-12, 1) < 1e-6


def test_cross_entropy_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        cross_entropy(0.4, 2)


def test_focal_reduces_to_cross_entropy():
    p = np.linspace(0.001, 0.999, 1000)
    for y in (0, 1):
        assert np.max(np.abs(focal_loss(p, y, FocalParams(0.0, 1.0)) - cross_entropy(p, y))) <= 1e-12


def test_focal_examples():
    assert abs(focal_loss(0.5, 1, FocalParams(2.0, 1.0)) - 0.25 * math.log(2)) <= 1e-15
    assert abs(focal_loss(0.5, 1, FocalParams(2.0, 1.0)) - 0.173287) <= 1e-6
    assert focal_loss_pt(1.0, FocalParams(2.0, 0.25)) == 0.0


def test_focal_rejects_negative_gamma():
    with pytest.raises(ValueError, match="gamma"):
        FocalParams(gamma=-0.5)


def test_down_weighting_ratio_is_decreasing():
    pt = np.linspace(0.01, 0.99, 500)
    for gamma in (0.5, 1.0, 2.0, 5.0):
        fp = FocalParams(gamma, 0.25)
        ratio = focal_loss_pt(pt, fp) / -np.log(pt)
        assert np.allclose(ratio, 0.25 * (1 - pt) ** gamma, atol=1e-14)
        assert np.all(np.diff(ratio) < 0)
        assert np.all(focal_loss_pt(pt, fp) >= 0) and np.all(np.diff(focal_loss_pt(pt, fp)) < 0)


def test_smooth_l1_examples():
    assert box_regression_loss([1, 2, 3, 4], [1, 2, 3, 4]) == 0.0
    assert box_regression_loss([0.5, 0, 0, 0], [0, 0, 0, 0]) == 0.125
    assert box_regression_loss([0, 0, -2, 0], [0, 0, 0, 0]) == 1.5


def test_tensor_focal_matches_scalar(rng):
    z = rng.standard_normal(50) * 3
    y = rng.integers(0, 2, size=50)
    fp = FocalParams(2.0, 0.25)
    got = float(sigmoid_focal_loss(Tensor(z), y, fp).data)
    want = float(np.sum(focal_loss(1 / (1 + np.exp(-z)), y, fp)))
    assert abs(got - want) <= 1e-10


def test_tensor_focal_gradient_in_logit(rng):
    for fp in (FocalParams(2.0, 0.25), CROSS_ENTROPY, FocalParams(0.5, 1.0)):
        z = rng.standard_normal(20) * 2
        y = rng.integers(0, 2, size=20)
        zt = Tensor(z, requires_grad=True)
        sigmoid_focal_loss(zt, y, fp).backward()
        h = 1e-5
        for i in range(20):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            num = (float(sigmoid_focal_loss(Tensor(zp), y, fp).data) - float(sigmoid_focal_loss(Tensor(zm), y, fp).data)) / (2 * h)
            assert abs(num - zt.grad[i]) <= 1e-6 * max(abs(num), 1e-3)


def test_tensor_focal_weights_mask(rng):
    z = rng.standard_normal(6)
    y = np.array([1, 0, 1, 0, 1, 0])
    w = np.array([1, 1, 0, 0, 1, 1.0])
    masked = float(sigmoid_focal_loss(Tensor(z), y, FocalParams(), w).data)
    keep = w > 0
    assert abs(masked - float(sigmoid_focal_loss(Tensor(z[keep]), y[keep], FocalParams()).data)) <= 1e-12


def test_tensor_smooth_l1(rng):
    pred = Tensor(np.array([[0.5, 0.0, -2.0, 0.1]]), requires_grad=True)
    loss = smooth_l1_loss(pred, np.zeros((1, 4)))
    assert abs(float(loss.data) - (0.125 + 1.5 + 0.005)) <= 1e-15
    loss.backward()
    assert np.allclose(pred.grad, [[0.5, 0.0, -1.0, 0.1]])


def test_tensor_losses_shape_checks():
    with pytest.raises(ValueError, match="shape"):
        sigmoid_focal_loss(Tensor(np.zeros(3)), np.zeros(4, dtype=int))
    with pytest.raises(ValueError, match="shape"):
        smooth_l1_loss(Tensor(np.zeros((2, 4))), np.zeros((1, 4)))
