"""Training losses and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5  # pixel L1
    gamma: float = 0.5  # 1 - SSIM
    lam: float = 1.0  # pose-feature alignment
    mu: float = 0.9  # per-stage depth decay

    def __post_init__(self):
        if min(self.beta, self.gamma, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.mu <= 1:
            raise ValueError(f"depth decay mu must lie in (0, 1], got {self.mu}")


@dataclass(frozen=True)
class LossReport:
    render: float
    depth: float
    pose_fusion: float
    total: float
    objective: Tensor | None = None  # differentiable total


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    mu_dssim: float
    sigma_dssim: float
    epe: float
    pct_1px: float


# ------------------------------------------------------------------ SSIM


@lru_cache(maxsize=32)
def _window_matrix(n, dtype_name):
    """(n - 10, n) banded matrix applying the 1-D Gaussian window at valid positions."""
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = k
    m.setflags(write=False)
    return m.astype(dtype_name)


def _gray(img) -> Tensor:
    img = tc.as_tensor(img)
    if img.ndim == 2:
        return img
    if img.shape[-1] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    return tc.matmul(img, LUMA.reshape(3, 1).astype(img.dtype)).reshape(img.shape[:-1])


def ssim_map(a, b) -> Tensor:
    """Local SSIM at every valid 11x11 window position, on luma."""
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"ssim: shapes {ga.shape} and {gb.shape} differ")
    h, w = ga.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    dt = ga.dtype.name
    mv, mh = _window_matrix(h, dt), _window_matrix(w, dt).T

    def filt(x):
        return tc.matmul(tc.matmul(mv, x), mh)

    mu_a, mu_b = filt(ga), filt(gb)
    saa = filt(ga * ga) - mu_a * mu_a
    sbb = filt(gb * gb) - mu_b * mu_b
    sab = filt(ga * gb) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + C1) * (2.0 * sab + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (saa + sbb + C2)
    return num / den


def ssim(a, b) -> float:
    if np.array_equal(np.asarray(tc.as_tensor(a).data), np.asarray(tc.as_tensor(b).data)):
        _gray(a)  # still validate the shape
        return 1.0
    return float(ssim_map(a, b).data.mean())


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def delta_ssim_stats(pred_frames, gt_frames, mode="gt"):
    """Mean and population std of frame-to-frame SSIM changes.

    ``mode="gt"`` differences per-frame SSIM against ground truth;
    ``mode="pred"`` scores consecutive predictions against each other and
    differences those.
    """
    if len(pred_frames) < 2:
        raise ValueError("delta_ssim_stats needs at least 2 frames")
    if mode == "gt":
        if len(gt_frames) != len(pred_frames):
            raise ValueError("delta_ssim_stats: prediction and ground-truth lengths differ")
        scores = np.array([ssim(p, g) for p, g in zip(pred_frames, gt_frames)])
    elif mode == "pred":
        scores = np.array([ssim(pred_frames[t], pred_frames[t - 1]) for t in range(1, len(pred_frames))])
        if scores.size < 2:
            return 0.0, 0.0
    else:
        raise ValueError(f"unknown delta-SSIM mode {mode!r}")
    d = np.abs(np.diff(scores))
    return float(d.mean()), float(d.std())


def epe_1px(pred, gt, mask, focal=None, baseline=None):
    """Masked end-point error and percentage under one unit.

    With ``focal`` and ``baseline`` the depths are first converted to
    disparity-equivalent pixels ``focal * baseline / depth``; otherwise raw
    depth units are compared.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if pred.shape != gt.shape or m.shape != gt.shape:
        raise ValueError("epe_1px: prediction, ground truth and mask must share shape")
    if not m.any():
        raise ValueError("epe_1px: empty mask")
    p, g = pred[m], gt[m]
    if focal is not None and baseline is not None:
        s = float(focal) * float(baseline)
        err = np.abs(s / np.maximum(p, 1e-6) - s / np.maximum(g, 1e-6))
    else:
        err = np.abs(p - g)
    return float(err.mean()), float(100.0 * np.mean(err < 1.0))


# ---------------------------------------------------------------- losses


def render_loss(pred, gt, beta=0.5, gamma=0.5) -> Tensor:
    """beta * mean|pred - gt| + gamma * (1 - SSIM(pred, gt))."""
    pred = tc.as_tensor(pred)
    gt = tc.as_tensor(gt, pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"render_loss: prediction {pred.shape} vs target {gt.shape}")
    if np.array_equal(pred.data, gt.data):
        # both terms vanish exactly; keep the graph so gradients are still defined
        return tc.tabs(pred - gt).mean() * beta
    loss = tc.tabs(pred - gt).mean() * beta
    if gamma:
        loss = loss + (1.0 - ssim_map(pred, gt).mean()) * gamma
    return loss


def depth_loss(stages, d_gt, mask, mu=0.9) -> Tensor:
    """sum_t mu^(T - t) * masked mean |d_t - d_gt| over the T refinement stages."""
    if not stages:
        raise ValueError("depth_loss: need at least one stage")
    m = np.asarray(mask).astype(bool)
    d_gt = np.asarray(tc.as_tensor(d_gt).data)
    dt = tc.as_tensor(stages[0]).dtype
    for s in stages:
        if tc.as_tensor(s).shape != d_gt.shape:
            raise ValueError(f"depth_loss: stage {tc.as_tensor(s).shape} vs target {d_gt.shape}")
    if m.shape != d_gt.shape:
        raise ValueError(f"depth_loss: mask {m.shape} vs target {d_gt.shape}")
    count = int(m.sum())
    if count == 0:
        log.warning("depth_loss: empty foreground mask, returning 0")
        return tc.as_tensor(stages[-1]).sum() * 0.0
    w = m.astype(dt) / count
    n = len(stages)
    total = None
    for t, d in enumerate(stages, start=1):
        term = (tc.tabs(tc.as_tensor(d) - d_gt.astype(dt)) * w).sum() * (mu ** (n - t))
        total = term if total is None else total + term
    return total


def pose_fusion_loss(f_joint, f_pose, lam=1.0) -> Tensor:
    """lam * mean|f_joint - f_pose|; ``f_pose`` is treated as a fixed target."""
    f_joint = tc.as_tensor(f_joint)
    target = tc.as_tensor(f_pose).detach()
    if f_joint.shape != target.shape:
        raise ValueError(f"pose_fusion_loss: {f_joint.shape} vs {target.shape}")
    return tc.tabs(f_joint - target).mean() * lam


def total_loss(render, depth, pose_fusion) -> LossReport:
    parts = [tc.as_tensor(v) for v in (render, depth, pose_fusion)]
    r, d, p = (float(np.asarray(t.data).reshape(())) for t in parts)
    obj = parts[0] + parts[1] + parts[2]
    return LossReport(r, d, p, r + d + p, obj)
