import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semifss.errors import NegativeLambda, RangeViolation, ShapeMismatch
from semifss.objectives import EPS, LossReport, few_shot_loss, joint_loss, surrogate_loss


def bce_oracle(pred, target):
    """Scalar loop over every element, clipping each probability to [EPS, 1 - EPS]."""
    pred, target = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(target, dtype=np.float64).ravel()
    total = 0.0
    for p, y in zip(pred, target):
        p = min(max(p, EPS), 1 - EPS)
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(pred)


def test_perfect_prediction():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert float(few_shot_loss(y, y)) == pytest.approx(-math.log(1 - EPS), abs=1e-12)
    assert float(few_shot_loss(y, y)) < 1e-6


def test_half_probability_is_ln2(rng):
    target = torch.tensor((rng.uniform(size=(9, 9)) < 0.5).astype(np.float64))
    half = torch.full((9, 9), 0.5, dtype=torch.float64)
    assert abs(float(few_shot_loss(half, target)) - math.log(2)) <= 1e-9
    clean = torch.tensor(rng.uniform(size=(4, 4, 3)))
    assert abs(float(surrogate_loss(torch.full((4, 4, 3), 0.5, dtype=torch.float64), clean)) - math.log(2)) <= 1e-9


def test_few_shot_matches_oracle(rng):
    for _ in range(50):
        pred = rng.uniform(size=(4, 4))
        target = (rng.uniform(size=(4, 4)) < 0.5).astype(np.float64)
        assert abs(float(few_shot_loss(torch.tensor(pred), torch.tensor(target))) - bce_oracle(pred, target)) <= 1e-6


def test_surrogate_matches_oracle(rng):
    for _ in range(50):
        rec = rng.uniform(size=(2, 2, 1))
        clean = rng.uniform(size=(2, 2, 1))
        assert abs(float(surrogate_loss(torch.tensor(rec), torch.tensor(clean))) - bce_oracle(rec, clean)) <= 1e-6


def test_surrogate_binary_target_perfect():
    x = torch.tensor([[[0.0], [1.0]], [[1.0], [1.0]]], dtype=torch.float64)
    assert float(surrogate_loss(x.clamp(EPS, 1 - EPS), x)) < 1e-6


def test_shape_and_range_errors():
    with pytest.raises(ShapeMismatch):
        few_shot_loss(torch.zeros(2, 2), torch.zeros(3, 2))
    with pytest.raises(ShapeMismatch):
        surrogate_loss(torch.zeros(2, 2, 3), torch.zeros(2, 2, 1))
    with pytest.raises(RangeViolation):
        surrogate_loss(torch.full((2, 2), 0.5), torch.full((2, 2), 1.5))


def test_joint_loss():
    assert joint_loss(0.5, 0.25, 1.0) == 0.75
    assert joint_loss(1.0, 0.5, 2.0) == 2.0
    few, sur = torch.tensor(0.123456789), torch.tensor(7.5)
    assert torch.equal(joint_loss(few, sur, 0.0), few)
    with pytest.raises(NegativeLambda):
        joint_loss(1.0, 1.0, -0.1)


def test_loss_report_record():
    r = LossReport(0.5, 0.25, 0.75, 1.0)
    assert r.as_record() == {"few_shot": 0.5, "surrogate": 0.25, "total": 0.75, "lambda": 1.0}
    assert r.total == r.few_shot + r.lam * r.surrogate


@pytest.mark.parametrize("x", [0.0, 0.2, 0.5, 0.9, 1.0])
def test_minimum_at_target(x):
    # grid search over the reconstruction value at fixed target x
    grid = np.linspace(0.001, 0.999, 999)
    values = [float(surrogate_loss(torch.tensor([g], dtype=torch.float64), torch.tensor([x], dtype=torch.float64)))
              for g in grid]
    best = grid[int(np.argmin(values))]
    assert abs(best - min(max(x, 0.001), 0.999)) <= 1.5e-3
    assert min(values) >= 0
    if 0 < x < 1:
        entropy = -(x * math.log(x) + (1 - x) * math.log(1 - x))
        assert min(values) == pytest.approx(entropy, abs=1e-5)


@given(seed=st.integers(0, 2**32))
@settings(max_examples=50, deadline=None)
def test_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    pred = r.uniform(size=(5, 6))
    target = (r.uniform(size=(5, 6)) < 0.5).astype(np.float64)
    perm = r.permutation(30)
    a = float(few_shot_loss(torch.tensor(pred), torch.tensor(target)))
    b = float(few_shot_loss(torch.tensor(pred.ravel()[perm]), torch.tensor(target.ravel()[perm])))
    assert a == pytest.approx(b, abs=1e-12)
    assert a >= 0
