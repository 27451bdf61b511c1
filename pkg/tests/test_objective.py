import numpy as np
import pytest
import torch

from loraseg.config import LossSpec
from loraseg.errors import ShapeError
from loraseg.objective import focal_tversky
from oracles import focal_tversky_oracle

SPEC = LossSpec()  # alpha 0.6, beta 0.4, gamma 2.5, eps 1e-6


def test_perfect_prediction_is_exactly_zero():
    targets = torch.zeros(1, 1, 4, 4)
    targets[0, 0, 1:3, 1:3] = 1.0
    loss = focal_tversky(targets.clone(), targets, SPEC)
    assert loss.item() == 0.0


def test_total_miss_approaches_one():
    targets = torch.ones(1, 1, 8, 8)
    probs = torch.zeros(1, 1, 8, 8)
    loss = focal_tversky(probs, targets, SPEC)
    # TI collapses to eps / (beta*N + eps)
    n = 64
    ti = SPEC.epsilon / (SPEC.beta * n + SPEC.epsilon)
    assert loss.item() == pytest.approx((1 - ti) ** SPEC.gamma, rel=1e-5)
    assert loss.item() > 0.999


def test_single_pixel_frozen_value():
    # p=0.8, t=1: TP=.8, FP=0, FN=.2, TI=(0.8+1e-6)/(0.8+0.08+1e-6)
    probs = torch.tensor([[[[0.8]]]], dtype=torch.float64)
    targets = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    loss = focal_tversky(probs, targets, SPEC)
    assert loss.item() == pytest.approx(0.0024918222149846876, rel=1e-10)


def test_matches_arbitrary_precision_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        probs = rng.uniform(0.0, 1.0, size=(2, 1, 8, 8)).astype(np.float32)
        targets = (rng.uniform(size=(2, 1, 8, 8)) < 0.3).astype(np.float32)
        got = focal_tversky(torch.from_numpy(probs), torch.from_numpy(targets), SPEC)
        want = focal_tversky_oracle(
            probs, targets, SPEC.alpha, SPEC.beta, SPEC.gamma, SPEC.epsilon
        )
        assert abs(got.item() - want) <= 1e-6


def test_inverse_exponent_mode_matches_oracle():
    spec = LossSpec(exponent_mode="inverse")
    rng = np.random.default_rng(6)
    for _ in range(25):
        probs = rng.uniform(0.0, 1.0, size=(1, 1, 8, 8)).astype(np.float32)
        targets = (rng.uniform(size=(1, 1, 8, 8)) < 0.3).astype(np.float32)
        got = focal_tversky(torch.from_numpy(probs), torch.from_numpy(targets), spec)
        want = focal_tversky_oracle(
            probs, targets, spec.alpha, spec.beta, spec.gamma, spec.epsilon,
            exponent_mode="inverse",
        )
        assert abs(got.item() - want) <= 1e-6


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    probs = rng.uniform(0.1, 0.9, size=(1, 1, 4, 4))
    targets = (rng.uniform(size=(1, 1, 4, 4)) < 0.4).astype(np.float64)
    p = torch.tensor(probs, dtype=torch.float64, requires_grad=True)
    t = torch.tensor(targets, dtype=torch.float64)
    focal_tversky(p, t, SPEC).backward()
    analytic = p.grad.numpy()

    h = 1e-5
    for idx in np.ndindex(probs.shape):
        up = probs.copy()
        up[idx] += h
        down = probs.copy()
        down[idx] -= h
        fd = (
            focal_tversky(torch.tensor(up), t, SPEC).item()
            - focal_tversky(torch.tensor(down), t, SPEC).item()
        ) / (2 * h)
        denom = max(abs(fd), 1e-8)
        assert abs(analytic[idx] - fd) / denom < 1e-4


def test_monotone_in_predictions():
    rng = np.random.default_rng(8)
    probs = rng.uniform(0.2, 0.8, size=(1, 1, 4, 4)).astype(np.float64)
    targets = (rng.uniform(size=(1, 1, 4, 4)) < 0.5).astype(np.float64)
    t = torch.tensor(targets)
    base = focal_tversky(torch.tensor(probs), t, SPEC).item()
    for idx in np.ndindex(probs.shape):
        bumped = probs.copy()
        bumped[idx] = max(bumped[idx] - 0.1, 0.0)
        moved = focal_tversky(torch.tensor(bumped), t, SPEC).item()
        if targets[idx] == 1:
            assert moved >= base - 1e-12  # lowering a hit never helps
        else:
            assert moved <= base + 1e-12  # lowering a false positive never hurts


def test_focusing_grows_with_gamma():
    # two predictions with TI u < v: loss ratio grows with gamma
    targets = torch.ones(1, 1, 2, 2)
    worse = torch.full((1, 1, 2, 2), 0.55)
    better = torch.full((1, 1, 2, 2), 0.9)
    ratios = []
    for gamma in (1.0, 2.5):
        spec = LossSpec(gamma=gamma)
        ratios.append(
            focal_tversky(worse, targets, spec).item()
            / focal_tversky(better, targets, spec).item()
        )
    assert ratios[1] > ratios[0]


def test_reduction_is_mean_over_images():
    probs = torch.rand(3, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    targets = (torch.rand(3, 1, 4, 4, generator=torch.Generator().manual_seed(2)) < 0.4).double()
    whole = focal_tversky(probs, targets, SPEC).item()
    singles = [
        focal_tversky(probs[i : i + 1], targets[i : i + 1], SPEC).item() for i in range(3)
    ]
    assert whole == pytest.approx(sum(singles) / 3, rel=1e-12)


def test_input_validation():
    with pytest.raises(ShapeError, match="shape"):
        focal_tversky(torch.rand(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), SPEC)
    with pytest.raises(ShapeError, match="binary"):
        focal_tversky(torch.rand(1, 1, 2, 2), torch.full((1, 1, 2, 2), 0.5), SPEC)
    with pytest.raises(ShapeError, match=r"\[0, 1\]"):
        focal_tversky(torch.full((1, 1, 2, 2), 1.5), torch.ones(1, 1, 2, 2), SPEC)
