"""Pixel-aligned Gaussian parameter maps, the analytic prior, and lifting to a cloud.

Raw decoder channel layout (last axis, 10 channels in this order)::

    0:3  scale        softplus -> metres
    3:6  rotation     axis-angle vector -> unit quaternion (w, x, y, z)
    6:8  opacity      sigmoid -> (alpha, auxiliary foreground)
    8    confidence   blend logit
    9    depth        residual added to the lifting depth (used by the model)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .geometry import Camera, unproject_depth_map
from .tensorcore import Tensor

RAW_CHANNELS = 10
SCALE, ROTATION, OPACITY, CONFIDENCE, DEPTH = slice(0, 3), slice(3, 6), slice(6, 8), slice(8, 9), slice(9, 10)

CLOUD_MAGIC = b"PGCL"
CLOUD_VERSION = 1
_FLOATS_PER_PRIMITIVE = 14


@dataclass
class RawGaussianMap:
    scale: Tensor  # (H, W, 3)
    rotation: Tensor  # (H, W, 3)
    opacity: Tensor  # (H, W, 2)
    confidence: Tensor  # (H, W, 1)

    @classmethod
    def split(cls, raw) -> "RawGaussianMap":
        """Slice a (H, W, >=9) head output into its fields."""
        raw = tc.as_tensor(raw)
        if raw.shape[-1] < 9:
            raise ValueError(f"raw Gaussian map needs at least 9 channels, got {raw.shape[-1]}")
        return cls(raw[..., SCALE], raw[..., ROTATION], raw[..., OPACITY], raw[..., CONFIDENCE])


@dataclass
class GaussianMap:
    scale: Tensor  # (H, W, 3) > 0
    rotation: Tensor  # (H, W, 4) unit quaternion, w first
    opacity: Tensor  # (H, W, 1) in (0, 1)
    aux: Tensor  # (H, W, 1) in (0, 1)

    @property
    def shape(self):
        return self.scale.shape[:-1]


# The prior shares the activated layout.
PriorMap = GaussianMap


@dataclass
class GaussianCloud:
    """N primitives; fields are Tensors (differentiable) or plain arrays."""

    means: Tensor  # (N, 3) world metres
    quats: Tensor  # (N, 4)
    scales: Tensor  # (N, 3)
    opacity: Tensor  # (N,)
    rgb: Tensor  # (N, 3)

    def __len__(self):
        return int(np.shape(_data(self.means))[0])

    def numpy(self, dtype=None) -> "GaussianCloud":
        def conv(v):
            a = np.asarray(_data(v))
            return a.astype(dtype) if dtype is not None else a.copy()

        return GaussianCloud(*(conv(getattr(self, f)) for f in _FIELDS))

    @classmethod
    def empty(cls, dtype=np.float64) -> "GaussianCloud":
        return cls(
            np.zeros((0, 3), dtype), np.zeros((0, 4), dtype), np.zeros((0, 3), dtype), np.zeros(0, dtype), np.zeros((0, 3), dtype)
        )


_FIELDS = ("means", "quats", "scales", "opacity", "rgb")


def _data(v):
    return v.data if isinstance(v, Tensor) else v


def merge_clouds(clouds) -> GaussianCloud:
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return GaussianCloud.empty()
    if len(clouds) == 1:
        return clouds[0]
    return GaussianCloud(*(tc.concat([tc.as_tensor(getattr(c, f)) for c in clouds], axis=0) for f in _FIELDS))


def _vec_norm(x, eps):
    return tc.sqrt((x * x).sum(axis=-1, keepdims=True) + eps * eps)


def axis_angle_to_quat(r) -> Tensor:
    """Exponential map of axis-angle vectors (..., 3) to unit quaternions (..., 4).

    The angle is clamped to pi.  The tiny epsilon keeps the map and its
    gradient finite at the origin, where it returns the identity exactly.
    """
    r = tc.as_tensor(r)
    n = _vec_norm(r, 1e-12)
    theta = tc.clamp_max(n, np.pi)
    half = theta * 0.5
    q = tc.concat([tc.cos(half), r * (tc.sin(half) / n)], axis=-1)
    return q / _vec_norm(q, 0.0)


def activate(raw: RawGaussianMap) -> GaussianMap:
    if raw.scale.shape[-1] != 3 or raw.rotation.shape[-1] != 3 or raw.opacity.shape[-1] != 2:
        raise ValueError("raw Gaussian map must carry 3 scale, 3 rotation and 2 opacity channels")
    op = tc.sigmoid(raw.opacity)
    return GaussianMap(tc.softplus(raw.scale), axis_angle_to_quat(raw.rotation), op[..., 0:1], op[..., 1:2])


def build_prior(depth, mask, camera: Camera, s0=1.0) -> PriorMap:
    """Isotropic one-pixel-footprint Gaussians at the given depth.

    ``camera`` may be at any resolution; it is rescaled to the map.
    """
    depth = tc.as_tensor(depth)
    m = np.asarray(mask, dtype=depth.dtype)
    if m.shape != depth.shape:
        raise ValueError(f"build_prior: mask {m.shape} vs depth {depth.shape}")
    if np.any((depth.data <= 0) & (m > 0)):
        raise ValueError("build_prior: depth must be positive under the mask")
    h, w = depth.shape
    fx = camera.resized(w, h).intrinsics.fx
    s = (depth * (s0 / fx)).reshape((h, w, 1))
    scale = tc.concat([s, s, s], axis=-1)
    rot = np.zeros((h, w, 4), dtype=depth.dtype)
    rot[..., 0] = 1.0
    mm = tc.Tensor(m[..., None].copy())
    return GaussianMap(scale, tc.Tensor(rot), mm, tc.Tensor(m[..., None].copy()))


def confidence_blend(dec: GaussianMap, prior: PriorMap, conf) -> GaussianMap:
    """sigma(c) * dec + (1 - sigma(c)) * prior per channel; quaternions renormalised."""
    conf = tc.as_tensor(conf)
    if dec.shape != prior.shape or conf.shape[:-1] != dec.shape:
        raise ValueError(f"confidence_blend: shapes {dec.shape}, {prior.shape}, {conf.shape} differ")
    s = tc.sigmoid(conf)
    rest = 1.0 - s

    def mix(a, b):
        return s * a + rest * b

    q = mix(dec.rotation, prior.rotation)
    q = q / _vec_norm(q, 0.0)
    return GaussianMap(
        mix(dec.scale, prior.scale), q, mix(dec.opacity, prior.opacity), mix(dec.aux, prior.aux)
    )


def lift_to_gaussians(gmap: GaussianMap, depth, mask, source_image, camera: Camera, use_aux=True) -> GaussianCloud:
    """One primitive per foreground pixel, row-major.

    Means unproject ``depth`` through ``camera`` (rescaled to the map), colour
    is read from ``source_image`` and opacity is alpha times the auxiliary
    foreground channel.
    """
    depth = tc.as_tensor(depth)
    h, w = depth.shape
    m = np.asarray(mask).astype(bool)
    img = tc.as_tensor(source_image, depth.dtype)
    if m.shape != (h, w) or img.shape[:2] != (h, w) or gmap.shape != (h, w):
        raise ValueError("lift_to_gaussians: map, depth, mask and image must share resolution")
    idx = np.flatnonzero(m.reshape(-1))
    if idx.size == 0:
        return GaussianCloud.empty(depth.dtype)
    cam = camera.resized(w, h)
    pts = unproject_depth_map(depth, cam).reshape((h * w, 3))
    op = gmap.opacity * gmap.aux if use_aux else gmap.opacity

    def pick(t, c):
        return tc.as_tensor(t).reshape((h * w, c))[idx]

    return GaussianCloud(
        pts[idx], pick(gmap.rotation, 4), pick(gmap.scale, 3), pick(op, 1).reshape((idx.size,)), pick(img, 3)
    )


# ---------------------------------------------------------------- export


def write_cloud(path, cloud: GaussianCloud):
    """Little-endian dump: magic, u32 version, u64 count, 14 float32 per primitive."""
    c = cloud.numpy(np.float64)
    n = len(c)
    rows = np.concatenate([c.means, c.quats, c.scales, c.opacity.reshape(n, 1), c.rgb], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<IQ", CLOUD_VERSION, n))
        f.write(rows.tobytes())


def read_cloud(path) -> GaussianCloud:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: not a Gaussian cloud file")
    version, n = struct.unpack_from("<IQ", blob, 4)
    if version != CLOUD_VERSION:
        raise ValueError(f"{path}: unsupported cloud version {version}")
    body = np.frombuffer(blob, dtype="<f4", offset=16)
    if body.size != n * _FLOATS_PER_PRIMITIVE:
        raise ValueError(f"{path}: truncated ({body.size} floats for {n} primitives)")
    rows = body.reshape(n, _FLOATS_PER_PRIMITIVE).astype(np.float32)
    return GaussianCloud(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10].copy(), rows[:, 11:14])
