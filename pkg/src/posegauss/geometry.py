"""Pinhole cameras, projection/unprojection and depth-driven feature warping.

Conventions: extrinsics map world to camera (``x_cam = R @ x_world + t``),
camera looks down +z, pixel centres sit at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

Z_NEAR = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} sensor"
            )

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def resized(self, width, height) -> "Intrinsics":
        """Intrinsics of the same sensor resampled to ``width`` x ``height`` pixels."""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            int(width),
            int(height),
        )


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-9 or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: RigidPose

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height

    @property
    def center(self):
        return self.pose.center

    def resized(self, width, height) -> "Camera":
        return Camera(self.intrinsics.resized(width, height), self.pose)

    @classmethod
    def look_at(cls, eye, target, intrinsics, up=(0.0, 1.0, 0.0)):
        """Camera at ``eye`` whose optical axis passes through ``target``.

        Image y grows downwards, so the camera's +y axis points along -up.
        """
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(intrinsics, RigidPose(r, -r @ eye))

    def to_json(self) -> dict:
        k = self.intrinsics
        return {
            "fx": k.fx,
            "fy": k.fy,
            "cx": k.cx,
            "cy": k.cy,
            "width": k.width,
            "height": k.height,
            "R": [float(v) for v in self.pose.rotation.reshape(-1)],
            "t": [float(v) for v in self.pose.translation],
        }

    @classmethod
    def from_json(cls, obj) -> "Camera":
        k = Intrinsics(obj["fx"], obj["fy"], obj["cx"], obj["cy"], int(obj["width"]), int(obj["height"]))
        r = np.asarray(obj["R"], dtype=np.float64).reshape(3, 3)
        return cls(k, RigidPose(r, np.asarray(obj["t"], dtype=np.float64)))


class Projection(NamedTuple):
    pixel: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def world_to_camera(points, camera: Camera):
    p = np.asarray(points, dtype=np.float64)
    return p @ camera.pose.rotation.T + camera.pose.translation


def project(points, camera: Camera) -> Projection:
    """Project world points (..., 3) to pixels.

    Points with camera-space z <= ``Z_NEAR`` are reported as not visible; their
    pixel and depth entries are zero rather than NaN.
    """
    pc = world_to_camera(points, camera)
    z = pc[..., 2]
    visible = z > Z_NEAR
    safe_z = np.where(visible, z, 1.0)
    k = camera.intrinsics
    u = k.fx * pc[..., 0] / safe_z + k.cx
    v = k.fy * pc[..., 1] / safe_z + k.cy
    pix = np.stack([u, v], axis=-1) * visible[..., None]
    return Projection(pix, np.where(visible, z, 0.0), visible)


def pixel_rays(camera: Camera, dtype=np.float64):
    """Camera-space rays with unit z through every pixel centre, shape (H, W, 3)."""
    k = camera.intrinsics
    u, v = np.meshgrid(np.arange(k.width, dtype=np.float64), np.arange(k.height, dtype=np.float64))
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return rays.astype(dtype)


def unproject(pixels, depth, camera: Camera):
    """Inverse of :func:`project` for positive depths; returns world points."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject: depth must be positive")
    pix = np.asarray(pixels, dtype=np.float64)
    k = camera.intrinsics
    x = (pix[..., 0] - k.cx) / k.fx * depth
    y = (pix[..., 1] - k.cy) / k.fy * depth
    pc = np.stack([x, y, depth], axis=-1)
    return (pc - camera.pose.translation) @ camera.pose.rotation


def unproject_depth_map(depth: Tensor, camera: Camera) -> Tensor:
    """World points (H, W, 3) for every pixel of a depth map, differentiable in depth."""
    depth = tc.as_tensor(depth)
    rays = pixel_rays(camera, depth.dtype)
    pc = tc.as_tensor(rays) * depth.reshape(depth.shape + (1,))
    r = camera.pose.rotation.astype(depth.dtype)
    t = camera.pose.translation.astype(depth.dtype)
    return tc.matmul(pc - t, r)


def reproject_coords(depth: Tensor, src_cam: Camera, tgt_cam: Camera):
    """Source-image coordinates of every target pixel lifted to ``depth``.

    Both cameras must already match the resolutions involved: ``tgt_cam`` the
    depth map, ``src_cam`` the image being sampled.  Returns differentiable
    ``(x, y)`` plus the numpy source-space depth.
    """
    depth = tc.as_tensor(depth)
    dt = depth.dtype
    rays = pixel_rays(tgt_cam, dt)
    # target camera -> source camera: R_s R_t^T (p - t_t) + t_s
    r_rel = (src_cam.pose.rotation @ tgt_cam.pose.rotation.T).astype(dt)
    t_rel = (src_cam.pose.translation - r_rel @ tgt_cam.pose.translation).astype(dt)
    dir_s = rays @ r_rel.T
    d = depth
    xs = d * dir_s[..., 0] + t_rel[0]
    ys = d * dir_s[..., 1] + t_rel[1]
    zs = d * dir_s[..., 2] + t_rel[2]
    zs_data = zs.data
    safe = np.where(zs_data > Z_NEAR, 0.0, 1.0).astype(dt)
    zs_safe = zs + safe
    k = src_cam.intrinsics
    u = xs / zs_safe * k.fx + k.cx
    v = ys / zs_safe * k.fy + k.cy
    return u, v, zs_data


def warp_features(feat, depth, src_cam: Camera, tgt_cam: Camera):
    """Backward-warp source features into the target view.

    ``feat`` is (h, w, C) in the source view and ``depth`` is a target-view
    depth map (H', W').  Cameras are given at any resolution and rescaled to
    the two grids.  Returns ``(warped, validity)`` where validity is 1 where
    the reprojection lands inside the source image with positive depth.
    """
    feat = tc.as_tensor(feat)
    depth = tc.as_tensor(depth, feat.dtype)
    h, w, _ = feat.shape
    hd, wd = depth.shape
    src = src_cam.resized(w, h)
    tgt = tgt_cam.resized(wd, hd)
    u, v, zs = reproject_coords(depth, src, tgt)
    inside = (u.data >= 0) & (u.data <= w - 1) & (v.data >= 0) & (v.data <= h - 1)
    valid = inside & (zs > Z_NEAR) & (depth.data > 0)
    validity = valid.astype(feat.dtype)[..., None]
    warped = tc.sample_bilinear(feat, u, v) * validity
    return warped, tc.Tensor(validity)
