"""Image/pose feature fusion and the row-wise correlation volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .geometry import Camera, warp_features
from .tensorcore import LayerParams, Tensor, conv2d, dense, static

STRATEGIES = (
    "concat",
    "add",
    "mul",
    "weighted_average",
    "feature_attention",
    "gated",
    "outer_product",
)


@dataclass
class FusionStrategy:
    name: str = static("concat")
    proj: LayerParams | None = None  # pose -> D_i channels
    gate: LayerParams | None = None  # gated: concat -> D_i gate logits
    attention: LayerParams | None = None  # feature_attention: pooled concat -> channel logits
    mix: LayerParams | None = None  # feature_attention / outer_product: -> D_i
    weight_logit: Tensor | None = None  # weighted_average
    d_img: int = static(0)
    d_pose: int = static(0)

    @classmethod
    def create(cls, name, d_img, d_pose, rng, dtype=np.float32):
        if name not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {name!r}; expected one of {STRATEGIES}")
        s = cls(name=name, d_img=d_img, d_pose=d_pose)
        both = d_img + d_pose
        if name in ("add", "mul", "weighted_average", "gated"):
            s.proj = LayerParams.init(1, 1, d_pose, d_img, rng, dtype, name="fusion.proj")
        if name == "weighted_average":
            s.weight_logit = tc.param(np.zeros(1, dtype=dtype), "fusion.weight_logit")
        if name == "gated":
            s.gate = LayerParams.init(1, 1, both, d_img, rng, dtype, name="fusion.gate")
        if name == "feature_attention":
            s.attention = LayerParams.init(1, 1, both, both, rng, dtype, name="fusion.attention")
            s.mix = LayerParams.init(1, 1, both, d_img, rng, dtype, name="fusion.mix")
        if name == "outer_product":
            s.mix = LayerParams.init(1, 1, d_img * d_pose, d_img, rng, dtype, name="fusion.mix")
        return s

    @property
    def out_channels(self):
        return self.d_img + self.d_pose if self.name == "concat" else self.d_img

    @property
    def weight(self):
        """Mixing weight of the weighted-average strategy, in (0, 1)."""
        return float(tc.sigmoid(self.weight_logit).data[0])


def fuse(img_feat, pose_feat, strategy: FusionStrategy) -> Tensor:
    img_feat = tc.as_tensor(img_feat)
    pose_feat = tc.as_tensor(pose_feat, img_feat.dtype)
    if img_feat.shape[:-1] != pose_feat.shape[:-1]:
        raise ValueError(
            f"fuse: image features {img_feat.shape} and pose features {pose_feat.shape} differ spatially"
        )
    name = strategy.name
    if name == "concat":
        return tc.concat([img_feat, pose_feat], axis=-1)
    if name == "outer_product":
        lead = img_feat.shape[:-1]
        outer = img_feat.reshape(lead + (img_feat.shape[-1], 1)) * pose_feat.reshape(lead + (1, pose_feat.shape[-1]))
        return conv2d(outer.reshape(lead + (-1,)), strategy.mix)
    if name == "feature_attention":
        both = tc.concat([img_feat, pose_feat], axis=-1)
        logits = dense(both.mean(axis=(-3, -2)), strategy.attention)
        a = tc.sigmoid(logits)
        a = a.reshape(a.shape[:-1] + (1, 1, a.shape[-1]))
        return conv2d(both * a, strategy.mix)
    pose_p = conv2d(pose_feat, strategy.proj)
    if name == "add":
        return img_feat + pose_p
    if name == "mul":
        return img_feat * pose_p
    if name == "weighted_average":
        w = tc.sigmoid(strategy.weight_logit)
        return w * img_feat + (1.0 - w) * pose_p
    if name == "gated":
        g = tc.sigmoid(conv2d(tc.concat([img_feat, pose_feat], axis=-1), strategy.gate))
        return g * img_feat + (1.0 - g) * pose_p
    raise ValueError(f"unknown fusion strategy {name!r}")


# ----------------------------------------------------------- correlation


def correlation_volume(target_feat, source_feats) -> Tensor:
    """C[i, j, k] = sum_s sum_h t[i, j, h] * s[i, k, h] / sqrt(D).

    Works on (H, W, D) maps or batched (N, H, W, D) maps; returns (..., H, W, W).
    """
    target_feat = tc.as_tensor(target_feat)
    if not source_feats:
        raise ValueError("correlation_volume: need at least one source view")
    d = target_feat.shape[-1]
    total = None
    for src in source_feats:
        src = tc.as_tensor(src, target_feat.dtype)
        if src.shape != target_feat.shape:
            raise ValueError(f"correlation_volume: source {src.shape} vs target {target_feat.shape}")
        nd = src.ndim
        axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        term = tc.matmul(target_feat, src.transpose(axes))
        total = term if total is None else total + term
    return total * (1.0 / np.sqrt(d))


def lookup_columns(volume, columns, radius) -> Tensor:
    """Gather 2r+1 linear samples of C[i, j, :] centred on ``columns[i, j]``."""
    if radius < 0:
        raise ValueError("lookup radius must be >= 0")
    columns = tc.as_tensor(columns)
    offsets = np.arange(-radius, radius + 1, dtype=columns.dtype)
    pos = columns.reshape(columns.shape + (1,)) + offsets
    return tc.sample_linear_last(volume, pos)


@dataclass
class PrewarpGeometry:
    """Reference view plus the sources pre-warped onto it through a depth plane.

    All cameras are expressed at the feature-grid resolution.
    """

    reference: Camera
    sources: list
    plane_depth: float

    def prewarp(self, feats):
        """Warp each source's features onto the reference grid via the plane."""
        h, w = self.reference.height, self.reference.width
        dt = tc.as_tensor(feats[0]).dtype
        plane = np.full((h, w), self.plane_depth, dtype=dt)
        return [warp_features(f, plane, cam, self.reference)[0] for f, cam in zip(feats, self.sources)]

    def columns(self, depth) -> Tensor:
        """Column in the pre-warped grid where each source sees the hypothesised point.

        The source ray through the point at ``depth`` is intersected with the
        pre-warp plane and the intersection projected back into the
        reference.  Averaged over sources when there are several.
        """
        depth = tc.as_tensor(depth)
        dt = depth.dtype
        k = self.reference.intrinsics
        u = np.arange(k.width, dtype=np.float64)
        ray_x = np.broadcast_to((u - k.cx) / k.fx, depth.shape).astype(dt)
        d0 = self.plane_depth
        total = None
        for cam in self.sources:
            # source centre in reference camera coordinates
            c = self.reference.pose.rotation @ cam.pose.center + self.reference.pose.translation
            s = (d0 - c[2]) / (depth - float(c[2]))
            xp = float(c[0]) + s * (depth * ray_x - float(c[0]))
            col = xp * (k.fx / d0) + k.cx
            total = col if total is None else total + col
        return total * (1.0 / len(self.sources))


def lookup_correlation(volume, depth, geometry: PrewarpGeometry, radius) -> Tensor:
    return lookup_columns(volume, geometry.columns(depth), radius)
