import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import posegauss.tensorcore as tc
from posegauss.objectives import (
    LossWeights,
    delta_ssim_stats,
    depth_loss,
    epe_1px,
    pose_fusion_loss,
    psnr,
    render_loss,
    ssim,
    total_loss,
)


def brute_ssim(a, b):
    """Direct windowed SSIM, one 11x11 window at a time."""
    luma = np.array([0.299, 0.587, 0.114])
    ga, gb = a @ luma, b @ luma
    k = np.exp(-0.5 * (np.arange(-5, 6) / 1.5) ** 2)
    k /= k.sum()
    win = np.outer(k, k)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(ga.shape[0] - 10):
        for j in range(ga.shape[1] - 10):
            x, y = ga[i:i + 11, j:j + 11], gb[i:i + 11, j:j + 11]
            mx, my = (win * x).sum(), (win * y).sum()
            vx, vy = (win * (x - mx) ** 2).sum(), (win * (y - my) ** 2).sum()
            cxy = (win * (x - mx) * (y - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_brute_force(rng):
    for shape in [(11, 11, 3), (20, 24, 3), (31, 17, 3)]:
        a, b = rng.uniform(size=shape), rng.uniform(size=shape)
        assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-10


img = arrays(np.float64, (12, 13, 3), elements=st.floats(0, 1))


@settings(max_examples=30, deadline=None)
@given(img, img)
def test_ssim_symmetric_and_bounded(a, b):
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert ssim(a, b) <= 1.0 + 1e-12


@settings(max_examples=20, deadline=None)
@given(img)
def test_ssim_of_identical_images_is_one(a):
    assert ssim(a, a) == 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.ones((8, 8, 3)))


def test_psnr_arithmetic():
    a = np.zeros((4, 5, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-12)
    assert psnr(a, a) == 99.0


def test_delta_ssim_stats_by_hand(rng):
    gt = [rng.uniform(size=(12, 12, 3)) for _ in range(4)]
    pred = [g + rng.normal(0, s, size=g.shape) for g, s in zip(gt, (0.01, 0.1, 0.02, 0.2))]
    s = [ssim(p, g) for p, g in zip(pred, gt)]
    d = np.abs(np.diff(s))
    mu, sd = delta_ssim_stats(pred, gt)
    assert mu == pytest.approx(d.mean()) and sd == pytest.approx(d.std())
    assert delta_ssim_stats(gt, gt) == (0.0, 0.0)
    with pytest.raises(ValueError):
        delta_ssim_stats(pred[:1], gt[:1])


def test_epe_units():
    gt = np.full((3, 3), 2.0)
    pred = gt + np.array([[0.5, 0, 0], [0, 2, 0], [0, 0, 0]])
    mask = np.ones((3, 3), bool)
    epe, pct = epe_1px(pred, gt, mask)
    assert epe == pytest.approx(2.5 / 9) and pct == pytest.approx(100 * 8 / 9)
    # disparity: f*b/z; 100 px * 0.1 m / 2 m = 5 px vs 100*0.1/4 = 2.5 px
    epe_d, _ = epe_1px(np.full((1, 1), 4.0), np.full((1, 1), 2.0), np.ones((1, 1)), 100.0, 0.1)
    assert epe_d == pytest.approx(2.5)
    with pytest.raises(ValueError):
        epe_1px(gt, gt, np.zeros((3, 3)))


def test_render_loss_grad(rng):
    pred = tc.param(rng.uniform(size=(14, 15, 3)))
    gt = rng.uniform(size=(14, 15, 3))
    assert tc.grad_check(lambda: render_loss(pred, gt, 0.5, 0.5), [pred], max_coords=150) < 1e-5
    assert render_loss(gt, gt).data == 0.0


def test_depth_loss_weights_and_grad(rng):
    gt = rng.uniform(1, 3, size=(6, 6))
    mask = rng.uniform(size=(6, 6)) > 0.3
    stages = [tc.param(gt + rng.normal(0, 0.3, size=gt.shape)) for _ in range(3)]
    val = depth_loss(stages, gt, mask, mu=0.5).data
    expect = sum(0.5 ** (3 - t) * np.abs(s.data - gt)[mask].mean() for t, s in enumerate(stages, start=1))
    assert val == pytest.approx(expect, rel=1e-12)
    assert tc.grad_check(lambda: depth_loss(stages, gt, mask, 0.9), stages) < 1e-5


def test_depth_loss_empty_mask_warns(caplog):
    with caplog.at_level(logging.WARNING):
        v = depth_loss([tc.param(np.ones((3, 3)))], np.ones((3, 3)), np.zeros((3, 3)))
    assert v.data == 0.0 and "empty" in caplog.text


def test_pose_fusion_loss_detaches_target(rng):
    fj = tc.param(rng.normal(size=(4, 4, 3)))
    fp = tc.param(rng.normal(size=(4, 4, 3)))
    assert tc.grad_check(lambda: pose_fusion_loss(fj, fp, 1.0), [fj]) < 1e-5
    with tc.Tape() as tape:
        out = pose_fusion_loss(fj, fp, 1.0)
    fp.zero_grad()
    tc.backprop(tape, output=out)
    assert fp.grad is None or not fp.grad.any()


def test_total_loss_sums_parts():
    rep = total_loss(tc.Tensor(np.array(0.5)), tc.Tensor(np.array(0.25)), tc.Tensor(np.array(0.125)))
    assert rep.total == 0.875 and float(rep.objective.data) == 0.875


def test_loss_weights_validate():
    with pytest.raises(ValueError):
        LossWeights(beta=-1)
    with pytest.raises(ValueError):
        LossWeights(mu=0)
