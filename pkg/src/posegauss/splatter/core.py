"""Projection of 3D Gaussians to screen space and differentiable tiled compositing."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .. import tensorcore as tc
from ..gaussmaps import GaussianCloud
from ..geometry import Z_NEAR, Camera
from ..tensorcore import Tensor
from . import kernels


@dataclass(frozen=True)
class RasterSettings:
    tile: int = 16
    alpha_max: float = kernels.ALPHA_MAX
    alpha_min: float = kernels.ALPHA_MIN
    t_stop: float = kernels.T_STOP
    cov_floor: float = 0.3  # px^2 added to every screen covariance
    sigma_cull: float = 3.0
    near: float = Z_NEAR

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError("tile size must be >= 1")
        if not 0 < self.alpha_min < self.alpha_max < 1:
            raise ValueError("need 0 < alpha_min < alpha_max < 1")

    @property
    def limits(self):
        return np.array([self.alpha_max, self.alpha_min, self.t_stop], dtype=np.float64)


DEFAULT_SETTINGS = RasterSettings()


class Splat2D(NamedTuple):
    mean2: np.ndarray
    cov2: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity: float
    radius: float


class RenderOutput(NamedTuple):
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) alpha-weighted view depth
    transmittance: np.ndarray  # (H, W)


class RenderResult(NamedTuple):
    image: Tensor
    depth: Tensor
    alpha: np.ndarray
    transmittance: np.ndarray


@dataclass
class TileGrid:
    tile: int
    width: int
    height: int
    start: np.ndarray
    end: np.ndarray
    order: np.ndarray  # splat indices, tile-major then (depth, index)

    def tile_list(self, tx, ty):
        t = ty * ((self.width + self.tile - 1) // self.tile) + tx
        return self.order[self.start[t]:self.end[t]]


# --------------------------------------------------------------- geometry


def quat_to_rotmat(q) -> Tensor:
    """(N, 4) quaternions (w, x, y, z), normalised first, to (N, 3, 3) rotations."""
    q = tc.as_tensor(q)
    q = q / tc.sqrt((q * q).sum(axis=-1, keepdims=True))
    w, x, y, z = (q[:, i] for i in range(4))
    rows = [
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]
    return tc.stack(rows, axis=-1).reshape((q.shape[0], 3, 3))


def _cov_factor(quat, scale) -> Tensor:
    """M = R diag(s), so that Sigma = M M^T."""
    r = quat_to_rotmat(quat)
    s = tc.as_tensor(scale)
    return r * s.reshape((s.shape[0], 1, 3))


def compute_cov3d(quat, scale):
    """Sigma = R diag(s^2) R^T for (4,)/(3,) or batched (N, 4)/(N, 3) inputs."""
    q = np.asarray(tc.as_tensor(quat).data, dtype=np.float64)
    s = np.asarray(tc.as_tensor(scale).data, dtype=np.float64)
    single = q.ndim == 1
    m = _cov_factor(q.reshape(-1, 4), s.reshape(-1, 3)).data
    cov = np.einsum("nik,njk->nij", m, m)
    return cov[0] if single else cov


def _screen_space(means, quats, scales, camera: Camera, cov_floor):
    """Differentiable pixel means, conics and the raw 2x2 covariances."""
    dt = means.dtype
    rot = camera.pose.rotation.astype(dt)
    pc = tc.matmul(means, rot.T) + camera.pose.translation.astype(dt)
    k = camera.intrinsics
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    u = x * iz * k.fx + k.cx
    v = y * iz * k.fy + k.cy
    n = means.shape[0]

    def col(t):
        return t.reshape((n, 1))

    # rows of J W, J the perspective Jacobian at the mean
    t0 = col(iz * k.fx) * rot[0] + col(-k.fx * x * iz * iz) * rot[2]
    t1 = col(iz * k.fy) * rot[1] + col(-k.fy * y * iz * iz) * rot[2]
    m = _cov_factor(quats, scales)
    a0 = tc.matmul(t0.reshape((n, 1, 3)), m).reshape((n, 3))
    a1 = tc.matmul(t1.reshape((n, 1, 3)), m).reshape((n, 3))
    ca = (a0 * a0).sum(axis=-1) + cov_floor
    cb = (a0 * a1).sum(axis=-1)
    cc = (a1 * a1).sum(axis=-1) + cov_floor
    det = ca * cc - cb * cb
    conic = tc.stack([cc / det, -cb / det, ca / det], axis=-1)
    mean2 = tc.stack([u, v], axis=-1)
    return mean2, conic, (ca.data, cb.data, cc.data), z


def _radius(ca, cb, cc, opacity, settings: RasterSettings):
    """Screen radius beyond which a splat's alpha is provably below the floor.

    alpha >= alpha_min requires d^T S^-1 d <= 2 ln(o / alpha_min), and that
    quadratic form is at least |d|^2 / lambda_max.  Taking the larger of this
    bound and ``sigma_cull`` standard deviations keeps the tiled result equal
    to the unculled reference.
    """
    mid = 0.5 * (ca + cc)
    lam = mid + np.sqrt(np.maximum(mid * mid - (ca * cc - cb * cb), 0.0))
    ratio = np.maximum(np.asarray(opacity, dtype=np.float64) / settings.alpha_min, 1.0)
    k = np.maximum(settings.sigma_cull, np.sqrt(2.0 * np.log(ratio)))
    return k * np.sqrt(lam) + 1.0


def project_splat(means, quats, scales, rgb, opacity, camera: Camera, settings=DEFAULT_SETTINGS):
    """Screen-space splat for a single primitive, or ``None`` when culled."""
    means = np.asarray(means, dtype=np.float64).reshape(1, 3)
    pc = means @ camera.pose.rotation.T + camera.pose.translation
    if not pc[0, 2] > settings.near:
        return None
    mean2, conic, (ca, cb, cc), z = _screen_space(
        tc.Tensor(means), np.asarray(quats, np.float64).reshape(1, 4), np.asarray(scales, np.float64).reshape(1, 3),
        camera, settings.cov_floor,
    )
    r = float(_radius(ca, cb, cc, opacity, settings)[0])
    mu = mean2.data[0]
    w, h = camera.width, camera.height
    if mu[0] + r < 0 or mu[1] + r < 0 or mu[0] - r > w - 1 or mu[1] - r > h - 1:
        return None
    cov2 = np.array([[ca[0], cb[0]], [cb[0], cc[0]]])
    return Splat2D(mu.copy(), cov2, float(z.data[0]), np.asarray(rgb, np.float64).reshape(3), float(opacity), r)


# ---------------------------------------------------------------- render


def _as_cloud_tensors(cloud: GaussianCloud, dtype):
    out = []
    for f in ("means", "quats", "scales", "opacity", "rgb"):
        v = getattr(cloud, f)
        out.append(v if isinstance(v, Tensor) else tc.Tensor(np.asarray(v, dtype=dtype)))
    return out


def _prepare(cloud: GaussianCloud, camera: Camera, settings: RasterSettings, dtype):
    means, quats, scales, opacity, rgb = _as_cloud_tensors(cloud, dtype)
    dtype = means.dtype
    n = means.shape[0]
    if n == 0:
        return None
    z_all = means.data @ camera.pose.rotation[2].astype(dtype) + camera.pose.translation[2]
    keep = np.flatnonzero(z_all > settings.near)
    if keep.size == 0:
        return None
    if keep.size < n:
        means, quats, scales, opacity, rgb = (t[keep] for t in (means, quats, scales, opacity, rgb))
    mean2, conic, (ca, cb, cc), z = _screen_space(means, quats, scales, camera, settings.cov_floor)
    radius = _radius(ca, cb, cc, opacity.data, settings)
    feats = tc.concat([rgb, z.reshape((keep.size, 1))], axis=-1)
    return mean2, conic, opacity, feats, radius, z.data


def bin_tiles(mean2, radius, depth, width, height, tile=16) -> TileGrid:
    valid = np.isfinite(mean2).all(axis=1) & np.isfinite(radius)
    start, end, order = kernels.bin_splats(
        np.ascontiguousarray(mean2, dtype=np.float64), np.asarray(radius, np.float64), valid,
        np.asarray(depth, np.float64), int(width), int(height), int(tile),
    )
    return TileGrid(int(tile), int(width), int(height), start, end, order)


def _composite(mean2: Tensor, conic: Tensor, opacity: Tensor, feats: Tensor, bg, grid: TileGrid, settings):
    h, w = grid.height, grid.width
    dt = feats.dtype
    kf = feats.shape[1]
    args = (
        np.ascontiguousarray(mean2.data), np.ascontiguousarray(conic.data), np.ascontiguousarray(opacity.data),
        np.ascontiguousarray(feats.data), bg, grid.start, grid.end, grid.order, w, h, grid.tile, settings.limits,
    )
    out = np.empty((h, w, kf), dt)
    alpha = np.empty((h, w), dt)
    trans = np.empty((h, w), dt)
    last = np.empty((h, w), np.int64)
    kernels.composite_tiles(*args, out, alpha, trans, last)

    def bw(g):
        m = grid.order.size
        gm = np.zeros((m, 2))
        gc = np.zeros((m, 3))
        go = np.zeros(m)
        gf = np.zeros((m, kf))
        kernels.composite_tiles_backward(*args, trans, last, np.ascontiguousarray(g, dtype=np.float64), gm, gc, go, gf)
        n = mean2.shape[0]
        res = []
        for buf, shape in ((gm, (n, 2)), (gc, (n, 3)), (go, (n,)), (gf, (n, kf))):
            acc = np.zeros(shape)
            np.add.at(acc, grid.order, buf)  # fixed entry order: deterministic
            res.append(acc.astype(dt))
        return tuple(res)

    node = tc.custom_op(out, (mean2, conic, opacity, feats), bw)
    return node, alpha, trans


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0), settings=DEFAULT_SETTINGS,
           dtype=np.float64) -> RenderResult:
    """Differentiable render; gradients reach whichever cloud fields are Tensors."""
    h, w = camera.height, camera.width
    bg3 = np.asarray(background, dtype=np.float64).reshape(3)
    prep = _prepare(cloud, camera, settings, dtype)
    if prep is None:
        dt = tc.as_tensor(cloud.means).dtype if len(cloud) else np.dtype(dtype)
        img = np.broadcast_to(bg3.astype(dt), (h, w, 3)).copy()
        return RenderResult(tc.Tensor(img), tc.Tensor(np.zeros((h, w), dt)), np.zeros((h, w), dt), np.ones((h, w), dt))
    mean2, conic, opacity, feats, radius, z = prep
    grid = bin_tiles(mean2.data, radius, z, w, h, settings.tile)
    bg = np.concatenate([bg3, [0.0]])
    out, alpha, trans = _composite(mean2, conic, opacity, feats, bg, grid, settings)
    return RenderResult(out[..., 0:3], out[..., 3], alpha, trans)


def rasterize(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0), tile=16,
              settings=DEFAULT_SETTINGS, dtype=np.float64) -> RenderOutput:
    if tile != settings.tile:
        settings = RasterSettings(**{**settings.__dict__, "tile": tile})
    with_grad = render(cloud.numpy() if len(cloud) else cloud, camera, background, settings, dtype)
    return RenderOutput(with_grad.image.data, with_grad.alpha, with_grad.depth.data, with_grad.transmittance)


def rasterize_backward(cloud: GaussianCloud, camera: Camera, grad_image, background=(0.0, 0.0, 0.0),
                       settings=DEFAULT_SETTINGS, grad_depth=None) -> dict:
    """Gradients of sum(grad_image * image [+ grad_depth * depth]) w.r.t. every cloud field.

    The forward is replayed on a private tape; the arrays in ``cloud`` are
    untouched.  Returns a dict keyed by field name (means, quats, scales,
    opacity, rgb).
    """
    names = ("means", "quats", "scales", "opacity", "rgb")
    base = cloud.numpy(np.float64) if len(cloud) else GaussianCloud.empty()
    leaves = {f: tc.param(getattr(base, f)) for f in names}
    with tc.Tape() as tape:
        res = render(GaussianCloud(**leaves), camera, background, settings, np.float64)
        obj = (res.image * np.asarray(grad_image, np.float64)).sum()
        if grad_depth is not None:
            obj = obj + (res.depth * np.asarray(grad_depth, np.float64)).sum()
    if tape.nodes:
        tc.backprop(tape, output=obj)
    return {f: leaves[f].grad for f in names}


def rasterize_reference(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0),
                        settings=DEFAULT_SETTINGS) -> RenderOutput:
    """Unculled, untiled per-pixel compositing over the globally sorted cloud.

    Screen-space quantities are computed independently here in plain numpy
    (covariance via R diag(s^2) R^T and an explicit Jacobian).
    """
    h, w = camera.height, camera.width
    bg3 = np.asarray(background, dtype=np.float64).reshape(3)
    c = cloud.numpy(np.float64) if len(cloud) else GaussianCloud.empty()
    pc = c.means @ camera.pose.rotation.T + camera.pose.translation
    keep = np.flatnonzero(pc[:, 2] > settings.near)
    if keep.size == 0:
        img = np.broadcast_to(bg3, (h, w, 3)).copy()
        return RenderOutput(img, np.zeros((h, w)), np.zeros((h, w)), np.ones((h, w)))
    pc = pc[keep]
    k = camera.intrinsics
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2 = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)
    jac = np.zeros((keep.size, 2, 3))
    jac[:, 0, 0] = k.fx / z
    jac[:, 0, 2] = -k.fx * x / z**2
    jac[:, 1, 1] = k.fy / z
    jac[:, 1, 2] = -k.fy * y / z**2
    t = jac @ camera.pose.rotation
    sigma = compute_cov3d(c.quats[keep], c.scales[keep])
    cov2 = t @ sigma @ np.swapaxes(t, 1, 2) + settings.cov_floor * np.eye(2)
    inv = np.linalg.inv(cov2)
    conic = np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]], axis=1)
    order = np.lexsort((np.arange(keep.size), z))
    feats = np.concatenate([c.rgb[keep], z[:, None]], axis=1)
    bg = np.concatenate([bg3, [0.0]])
    out = np.empty((h, w, 4))
    alpha = np.empty((h, w))
    trans = np.empty((h, w))
    kernels.composite_reference(mean2, conic, np.ascontiguousarray(c.opacity[keep]), feats, bg, order, w, h,
                                settings.limits, out, alpha, trans)
    return RenderOutput(out[..., :3], alpha, out[..., 3], trans)


# ------------------------------------------------------------------ bench


def random_cloud(n, rng, center_depth=2.5, spread=0.6, scale=(0.01, 0.06), dtype=np.float64) -> GaussianCloud:
    """Random primitives in front of a camera at the origin looking down +z."""
    means = rng.uniform(-spread, spread, (n, 3))
    means[:, 2] += center_depth
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = rng.uniform(*scale, (n, 3))
    return GaussianCloud(
        means.astype(dtype), q.astype(dtype), scales.astype(dtype),
        rng.uniform(0.05, 0.95, n).astype(dtype), rng.uniform(0, 1, (n, 3)).astype(dtype),
    )


def bench(n_gaussians, width, height, threads=1, frames=20, seed=0, warmup=2):
    """Forward render timings on a random cloud; returns a CSV-ready row."""
    import numba

    from ..geometry import Intrinsics, RigidPose

    threads = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(threads)
    rng = np.random.default_rng(seed)
    f = 1.2 * width
    cam = Camera(Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height), RigidPose.identity())
    cloud = random_cloud(n_gaussians, rng, dtype=np.float32)
    for _ in range(warmup):
        rasterize(cloud, cam, dtype=np.float32)
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        rasterize(cloud, cam, dtype=np.float32)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.asarray(times)
    return {
        "n_gaussians": int(n_gaussians),
        "width": int(width),
        "height": int(height),
        "threads": threads,
        "ms_per_frame_mean": float(times.mean()),
        "ms_per_frame_p95": float(np.percentile(times, 95)),
    }
