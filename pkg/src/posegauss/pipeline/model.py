"""Network weights and the differentiable forward pass from source views to a rendered target."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensorcore as tc
from ..depthsolver import DepthSolverParams, DepthState, median_joint_depth, prewarp_geometries, solve_depth
from ..fusion import FusionStrategy, correlation_volume, fuse
from ..gaussmaps import (
    CONFIDENCE,
    DEPTH,
    RAW_CHANNELS,
    GaussianCloud,
    RawGaussianMap,
    activate,
    build_prior,
    confidence_blend,
    lift_to_gaussians,
    merge_clouds,
)
from ..posekit import encode_heatmaps, tps_blend, tps_reset
from ..splatter import RasterSettings, render
from ..tensorcore import LayerParams, ResidualParams, Tensor, conv2d, iter_params, residual_block
from .config import ModelConfig

SCALE_BIAS = -3.9  # softplus^-1(0.02 m), about the prior footprint at rig range
OPACITY_BIAS = 2.0


# ----------------------------------------------------------------- weights


@dataclass
class EncoderParams:
    stem: LayerParams
    units: list
    proj: LayerParams


@dataclass
class PoseBranchParams:
    stem: LayerParams
    units: list
    out: LayerParams  # -> D_p, the pose-alignment target
    up: list  # one conv per scale, deepest first, producing skip features


@dataclass
class DecoderParams:
    stages: list  # deepest first
    head: LayerParams
    tap: LayerParams  # deepest merge -> D_p


@dataclass
class ModelWeights:
    ie: EncoderParams
    de: EncoderParams
    pe: PoseBranchParams
    fusion: FusionStrategy
    solver: DepthSolverParams
    decoder: DecoderParams

    def named_params(self):
        return list(iter_params(self))

    def param_count(self):
        return int(sum(p.size for _, p in self.named_params()))


def unit_schedule(config: ModelConfig):
    """(width, stride) of the six residual units; k of them downsample."""
    w1, w2, w3, w4 = config.widths
    if config.k == 3:
        return [(w1, 2), (w1, 1), (w2, 2), (w2, 1), (w3, 2), (w4, 1)]
    return [(w1, 2), (w1, 1), (w2, 2), (w2, 1), (w3, 2), (w4, 2)]


def _encoder(cin, config: ModelConfig, rng, dtype, name):
    w = config.widths[0]
    units = []
    c = w
    for i, (width, stride) in enumerate(unit_schedule(config)):
        units.append(ResidualParams.init(c, width, rng, stride, config.se_reduction, dtype, name=f"{name}.unit{i}"))
        c = width
    return EncoderParams(
        LayerParams.init(3, 3, cin, w, rng, dtype, name=f"{name}.stem"),
        units,
        LayerParams.init(1, 1, c, config.d_img, rng, dtype, name=f"{name}.proj"),
    )


def skip_channels(config: ModelConfig):
    """Encoder feature width at each scale, full resolution first."""
    out = [config.widths[0]]
    sched = unit_schedule(config)
    for i, (width, stride) in enumerate(sched):
        last_at_scale = i + 1 == len(sched) or sched[i + 1][1] == 2
        if last_at_scale:
            out.append(width)
    out[-1] = config.d_img
    return out


def init_weights(config: ModelConfig, seed=None) -> ModelWeights:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = config.np_dtype
    ie = _encoder(3, config, rng, dt, "ie")
    de = _encoder(4, config, rng, dt, "de")
    pw, j = config.pose_width, config.joints
    pe = PoseBranchParams(
        LayerParams.init(3, 3, j, pw, rng, dt, name="pe.stem"),
        [ResidualParams.init(pw, pw, rng, 1, config.se_reduction, dt, name=f"pe.unit{i}") for i in range(2)],
        LayerParams.init(1, 1, pw, j, rng, dt, name="pe.out"),
        [
            LayerParams.init(3, 3, pw if i == 0 else config.pose_skip_width, config.pose_skip_width, rng, dt,
                             name=f"pe.up{i}")
            for i in range(config.k + 1)
        ],
    )
    fusion = FusionStrategy.create(config.fusion, config.d_img, config.d_pose, rng, dt)
    solver = DepthSolverParams.init(fusion.out_channels, config.solver_config, rng, dt)
    skips = skip_channels(config)[::-1]  # deepest first
    stages = []
    prev = 0
    for i, width in enumerate(config.decoder_widths):
        cin = prev + 2 * skips[i] + config.pose_skip_width
        stages.append(LayerParams.init(3, 3, cin, width, rng, dt, name=f"dec.stage{i}"))
        prev = width
    head = LayerParams.init(3, 3, prev, RAW_CHANNELS, rng, dt, name="dec.head")
    head.weight.data *= 0.1
    head.bias.data[0:3] = SCALE_BIAS
    head.bias.data[6:8] = OPACITY_BIAS
    tap = LayerParams.init(1, 1, config.decoder_widths[0], config.d_pose, rng, dt, name="dec.tap")
    return ModelWeights(ie, de, pe, fusion, solver, DecoderParams(stages, head, tap))


# ----------------------------------------------------------------- forward


def run_encoder(x, params: EncoderParams):
    """Returns the features at every scale, full resolution first."""
    h = tc.relu(conv2d(x, params.stem, padding=1))
    feats = [h]
    units = params.units
    for i, u in enumerate(units):
        h = residual_block(h, u)
        if i + 1 == len(units) or units[i + 1].stride == 2:
            feats.append(h)
    feats[-1] = conv2d(feats[-1], params.proj)
    return feats


def run_pose_branch(heat, params: PoseBranchParams, n_scales):
    """Pose features at feature resolution plus skip features, deepest first."""
    h = tc.relu(conv2d(heat, params.stem, padding=1))
    for u in params.units:
        h = residual_block(h, u)
    f_pose = conv2d(h, params.out)
    skips = []
    x = h
    for i in range(n_scales):
        if i:
            x = tc.upsample_nearest(x, 2)
        x = tc.relu(conv2d(x, params.up[i], padding=1))
        skips.append(x)
    return f_pose, skips


def run_decoder(ie_feats, de_feats, pose_skips, params: DecoderParams):
    """U-Net decode; returns (raw head output, deepest merge)."""
    ie_feats, de_feats = ie_feats[::-1], de_feats[::-1]
    x = None
    deepest = None
    for i, conv in enumerate(params.stages):
        parts = [ie_feats[i], de_feats[i], pose_skips[i]]
        if x is not None:
            parts.insert(0, tc.upsample_nearest(x, 2))
        x = tc.relu(conv2d(tc.concat(parts, axis=-1), conv, padding=1))
        if deepest is None:
            deepest = x
    return conv2d(x, params.head, padding=1), deepest


@dataclass
class SourceBatch:
    """S source views of one time step."""

    images: np.ndarray  # (S, H, W, 3)
    masks: np.ndarray  # (S, H, W)
    cameras: list
    joints: object  # JointSet, world space
    jitter: np.ndarray | None = None  # (S, J, 2) pixel offsets for the heatmaps


@dataclass
class ForwardOutput:
    image: Tensor  # (H, W, 3)
    depth: Tensor  # (H, W) rendered target depth
    alpha: np.ndarray
    stages: list  # per-stage (S, h, w) depth
    lift_depth: Tensor  # (S, H, W)
    f_joint: Tensor
    f_pose: Tensor
    confidence: Tensor  # (S, H, W, 1)
    cloud: GaussianCloud
    heatmaps: np.ndarray  # raw (S, h, w, J)
    smoothed: np.ndarray  # after TPS
    init_depths: np.ndarray = field(default=None)


def make_tps_states(config: ModelConfig, n_views=None):
    n = config.sources if n_views is None else n_views
    if config.share_tps:
        s = tps_reset(config.omega)
        return [s] * n
    return [tps_reset(config.omega) for _ in range(n)]


def forward(batch: SourceBatch, target_camera, weights: ModelWeights, config: ModelConfig, tps_states=None,
            background=(0.0, 0.0, 0.0)) -> ForwardOutput:
    dt = config.np_dtype
    s_views = len(batch.cameras)
    res = config.resolution
    fs = config.feat_size
    images = np.asarray(batch.images, dtype=dt)
    if images.shape != (s_views, res, res, 3):
        raise ValueError(f"forward: expected source images ({s_views}, {res}, {res}, 3), got {images.shape}")
    if len(batch.joints) != config.joints:
        raise ValueError(f"forward: {len(batch.joints)} joints supplied, config expects J={config.joints}")
    masks = np.asarray(batch.masks) > 0

    # pose heatmaps at feature resolution, TPS on the encoder branch only
    heat = np.stack([
        encode_heatmaps(batch.joints, cam, config.heatmap_sigma, (fs, fs),
                        None if batch.jitter is None else batch.jitter[i])
        for i, cam in enumerate(batch.cameras)
    ]).astype(dt)
    if tps_states is None:
        tps_states = make_tps_states(config, s_views)
    if config.share_tps:
        smoothed = tps_blend(heat, tps_states[0])[0]
    else:
        smoothed = np.stack([tps_blend(heat[i], tps_states[i])[0] for i in range(s_views)])
    smoothed = smoothed.astype(dt)

    # image features and fusion
    ie_feats = run_encoder(tc.Tensor(images), weights.ie)
    f_img = ie_feats[-1]
    pose_in = heat if config.pose_in_depth else np.zeros_like(heat)
    fused = fuse(f_img, tc.Tensor(pose_in), weights.fusion)

    # correlation against the other sources, pre-warped through each view's initial depth plane
    d0 = np.array([median_joint_depth(batch.joints, cam) for cam in batch.cameras])
    geoms = prewarp_geometries(batch.cameras, d0, (fs, fs))
    depth_chan = np.broadcast_to((d0 / config.solver_config.depth_scale).astype(dt)[:, None, None, None],
                                 (s_views, fs, fs, 1))
    corr_feat = tc.concat([fused, tc.Tensor(np.ascontiguousarray(depth_chan))], axis=-1)
    if s_views > 1:
        views = [corr_feat[a] for a in range(s_views)]
        vols = [
            correlation_volume(views[a], geoms[a].prewarp([views[b] for b in range(s_views) if b != a]))
            for a in range(s_views)
        ]
        volume = tc.stack(vols, axis=0)
    else:
        volume = tc.Tensor(np.zeros((1, fs, fs, fs), dtype=dt))
    d0_map = np.broadcast_to(d0.astype(dt)[:, None, None], (s_views, fs, fs)).copy()
    state = DepthState(tc.Tensor(d0_map), tc.Tensor(np.zeros((s_views, fs, fs, config.gru_hidden), dt)),
                       tc.Tensor(d0_map.copy()))
    sol = solve_depth(state, volume, geoms, fused, weights.solver, config.solver_config, (res, res))

    # depth encoder sees the image plus the refined depth relative to the initial plane
    rel = (sol.upsampled - d0_map[:, :1, :1]) * (1.0 / config.solver_config.depth_scale)
    de_in = tc.concat([tc.Tensor(images), rel.reshape((s_views, res, res, 1))], axis=-1)
    de_feats = run_encoder(de_in, weights.de)

    # pose branch and decoder
    f_pose, pose_skips = run_pose_branch(tc.Tensor(smoothed), weights.pe, config.k + 1)
    if not config.pose_in_skips:
        pose_skips = [p * 0.0 for p in pose_skips]
    raw, deepest = run_decoder(ie_feats, de_feats, pose_skips, weights.decoder)
    f_joint = conv2d(deepest, weights.decoder.tap)

    lift_depth = tc.clamp_min(
        sol.upsampled + raw[..., DEPTH].reshape((s_views, res, res)) * config.depth_residual_scale, config.d_min
    )
    clouds = []
    for s in range(s_views):
        rmap = RawGaussianMap.split(raw[s])
        dec = activate(rmap)
        prior = build_prior(lift_depth[s], masks[s], batch.cameras[s], config.prior_scale)
        blended = confidence_blend(dec, prior, rmap.confidence)
        clouds.append(lift_to_gaussians(blended, lift_depth[s], masks[s], images[s], batch.cameras[s]))
    cloud = merge_clouds(clouds)
    tgt = target_camera.resized(res, res) if target_camera.width != res else target_camera
    out = render(cloud, tgt, background, RasterSettings(tile=config.tile), dtype=dt)
    return ForwardOutput(
        out.image, out.depth, out.alpha, sol.stages, lift_depth, f_joint, f_pose, raw[..., CONFIDENCE], cloud,
        heat, smoothed, d0,
    )
