"""Joint sets, joint-to-heatmap encoding and the temporal pose stabilizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, project


@dataclass
class JointSet:
    names: tuple
    positions: np.ndarray  # (J, 3) world metres
    visible: np.ndarray  # (J,) bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.names) != len(self.positions) or len(self.visible) != len(self.positions):
            raise ValueError("joint names, positions and visibility must have equal length")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("joint positions must be finite")

    def __len__(self):
        return len(self.positions)


def joint_pixels(joints: JointSet, camera: Camera, out_size=None):
    """Projected joint positions on an ``out_size`` = (H', W') grid, plus a visibility mask."""
    if out_size is None:
        out_size = (camera.height, camera.width)
    cam = camera.resized(out_size[1], out_size[0])
    proj = project(joints.positions, cam)
    return proj.pixel, proj.visible & joints.visible


def encode_heatmaps(joints: JointSet, camera: Camera, sigma, out_size, offsets=None):
    """Per-joint Gaussian heatmaps of shape (H', W', J) with unit peak.

    ``sigma`` is in output-grid pixels.  ``offsets`` (J, 2), given in
    full-resolution pixels, perturbs the projected positions (used to inject
    detector-like jitter).  Joints behind the camera, flagged invisible or
    projecting off the grid yield all-zero channels.
    """
    if sigma <= 0:
        raise ValueError(f"heatmap sigma must be positive, got {sigma}")
    hh, ww = out_size
    pix, vis = joint_pixels(joints, camera, out_size)
    if offsets is not None:
        pix = pix + np.asarray(offsets, dtype=np.float64) * np.array([ww / camera.width, hh / camera.height])
    on_image = (pix[:, 0] >= 0) & (pix[:, 0] <= ww - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= hh - 1)
    keep = vis & on_image
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    d2 = (xs[..., None] - pix[:, 0]) ** 2 + (ys[..., None] - pix[:, 1]) ** 2
    heat = np.exp(-d2 / (2.0 * sigma**2))
    return heat * keep


@dataclass
class TPSState:
    """Recurrent state of the temporal pose stabilizer for one view/stream."""

    omega: float
    previous: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"TPS blending factor must lie in [0, 1], got {self.omega}")


def tps_reset(omega=0.8) -> TPSState:
    return TPSState(float(omega))


def tps_blend(current, state: TPSState):
    """Causal exponential smoothing: omega * current + (1 - omega) * previous.

    The history holds the previous *smoothed* heatmap.  On an empty history
    the current heatmap passes through unchanged and seeds it.  The state is
    updated in place and also returned.
    """
    current = np.asarray(current)
    if state.previous is None:
        smoothed = current.copy()
    else:
        if state.previous.shape != current.shape:
            raise ValueError(
                f"tps_blend: current heatmap {current.shape} vs stored {state.previous.shape}"
            )
        w = state.omega
        prev = state.previous
        if w == 1.0:
            smoothed = current.copy()
        elif w == 0.0:
            smoothed = prev.copy()
        else:
            # clip keeps the result inside the segment despite rounding
            smoothed = np.clip(prev + w * (current - prev), np.minimum(current, prev), np.maximum(current, prev))
    state.previous = smoothed
    return smoothed, state
