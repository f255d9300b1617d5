"""Iterative GRU depth refinement over a pre-warped correlation volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .fusion import PrewarpGeometry, lookup_columns, lookup_correlation
from .geometry import world_to_camera
from .tensorcore import GRUParams, LayerParams, Tensor, conv2d, conv_gru_step, static

RIG_MID_RANGE = 2.5


@dataclass
class SolverConfig:
    iterations: int = 8  # T
    downsample: int = 3  # k
    radius: int = 4
    hidden: int = 32
    context: int = 32
    d_min: float = 0.05
    step_scale: float = 0.1  # metres per unit of depth-head output
    depth_scale: float = 0.5  # metres per unit of the normalised depth input

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iteration count T must be >= 1")
        if self.downsample not in (3, 4):
            raise ValueError(f"downsampling stages k must be 3 or 4, got {self.downsample}")
        if self.radius < 0:
            raise ValueError("lookup radius must be >= 0")


@dataclass
class DepthState:
    depth: Tensor  # (..., h, w) metres
    hidden: Tensor  # (..., h, w, hidden)
    reference: Tensor  # (..., h, w) initial depth, used to normalise inputs
    t: int = 0


@dataclass
class DepthSolverParams:
    context: LayerParams
    gru: GRUParams
    head1: LayerParams
    head2: LayerParams

    @classmethod
    def init(cls, fused_channels, config: SolverConfig, rng, dtype=np.float32):
        n_corr = 2 * config.radius + 1
        return cls(
            LayerParams.init(1, 1, fused_channels, config.context, rng, dtype, name="solver.context"),
            GRUParams.init(config.hidden, n_corr + config.context + 1, rng, dtype=dtype, name="solver.gru"),
            LayerParams.init(3, 3, config.hidden, 32, rng, dtype, name="solver.head1"),
            LayerParams.init(3, 3, 32, 1, rng, dtype, name="solver.head2"),
        )


def median_joint_depth(joints, camera, fallback=RIG_MID_RANGE):
    """Median camera-space depth of visible joints in front of the camera."""
    z = world_to_camera(joints.positions, camera)[:, 2]
    ok = joints.visible & (z > 0)
    return float(np.median(z[ok])) if ok.any() else float(fallback)


def init_depth(pose_heatmap, joints, camera, config: SolverConfig, fallback=RIG_MID_RANGE, dtype=np.float32):
    """Constant depth at the median visible joint depth; zero hidden state."""
    h, w = np.asarray(pose_heatmap).shape[:2]
    d0 = median_joint_depth(joints, camera, fallback)
    depth = np.full((h, w), d0, dtype=dtype)
    return DepthState(
        tc.Tensor(depth), tc.Tensor(np.zeros((h, w, config.hidden), dtype=dtype)), tc.Tensor(depth.copy()), 0
    )


def depth_increment(hidden, params: DepthSolverParams, config: SolverConfig) -> Tensor:
    x = tc.relu(conv2d(hidden, params.head1, padding=1))
    delta = conv2d(x, params.head2, padding=1)
    return delta.reshape(delta.shape[:-1]) * config.step_scale


def refine_step(state: DepthState, volume, geometries, context, params: DepthSolverParams, config: SolverConfig):
    """One update D_t = max(D_{t-1} + dD, d_min).

    ``volume`` is (h, w, w) with one geometry, or (S, h, w, w) with a list of
    S geometries (one per reference view).  ``context`` is the projected
    context feature map with matching leading dims.
    """
    if state.t >= config.iterations:
        raise ValueError(f"refine_step: already at T={config.iterations}")
    batched = isinstance(geometries, (list, tuple))
    if batched:
        cols = [g.columns(state.depth[i]) for i, g in enumerate(geometries)]
        corr = lookup_columns(volume, tc.stack(cols, axis=0), config.radius)
    else:
        corr = lookup_correlation(volume, state.depth, geometries, config.radius)
    rel = (state.depth - state.reference) * (1.0 / config.depth_scale)
    x = tc.concat([corr, context, rel.reshape(rel.shape + (1,))], axis=-1)
    hidden = conv_gru_step(state.hidden, x, params.gru)
    depth = tc.autograd.clamp_min(state.depth + depth_increment(hidden, params, config), config.d_min)
    return DepthState(depth, hidden, state.reference, state.t + 1)


@dataclass
class DepthSolution:
    stages: list  # [d_1 ... d_T]
    hidden: Tensor
    upsampled: Tensor  # d_T at input resolution


def solve_depth(state: DepthState, volume, geometries, fused, params: DepthSolverParams, config: SolverConfig, out_size):
    """Run T refinement steps from ``state``; returns every stage plus d_T upsampled."""
    context = tc.relu(conv2d(fused, params.context))
    stages = []
    for _ in range(config.iterations):
        state = refine_step(state, volume, geometries, context, params, config)
        stages.append(state.depth)
    d = state.depth
    up = tc.resize_bilinear(d.reshape(d.shape + (1,)), *out_size)
    return DepthSolution(stages, state.hidden, up.reshape(up.shape[:-1]))


def prewarp_geometries(cameras, plane_depths, feat_size):
    """One :class:`PrewarpGeometry` per view, the others acting as its sources."""
    h, w = feat_size
    small = [c.resized(w, h) for c in cameras]
    out = []
    for a, cam in enumerate(small):
        others = [c for b, c in enumerate(small) if b != a]
        out.append(PrewarpGeometry(cam, others, float(plane_depths[a])))
    return out
