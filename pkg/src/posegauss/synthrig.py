"""Synthetic ground truth: a capsule figure, forward kinematics, ray-traced views, dataset I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .geometry import Camera, Intrinsics, pixel_rays, project
from .posekit import JointSet

FORMAT_VERSION = 1
SPEED_PRESETS = {"slow": 1.0, "medium": 3.0, "fast": 6.0}
LIGHT_DIR = np.array([0.35, 0.8, 0.5]) / np.linalg.norm([0.35, 0.8, 0.5])
AMBIENT = 0.35


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------- skeleton


@dataclass
class SkeletonSpec:
    names: tuple
    parents: tuple  # -1 for the root
    offsets: np.ndarray  # (J, 3) rest offset from the parent (root: world position)
    radii: np.ndarray  # (J,) radius of the bone ending at each joint (root unused)
    colors: np.ndarray  # (J, 3) colour of that bone

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.names)
        if not (len(self.parents) == n == len(self.offsets) == len(self.radii) == len(self.colors)):
            raise ValueError("skeleton fields must all have one entry per joint")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("skeleton needs exactly one root, at index 0")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {self.names[j]!r}: parent must precede it (tree in topological order)")
            if np.linalg.norm(self.offsets[j]) == 0:
                raise ValueError(f"joint {self.names[j]!r}: zero rest offset")
            if self.radii[j] <= 0:
                raise ValueError(f"joint {self.names[j]!r}: capsule radius must be positive")

    def __len__(self):
        return len(self.names)

    def bones(self):
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]

    def to_json(self):
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "radii": self.radii.tolist(),
            "colors": self.colors.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["names"]), tuple(obj["parents"]), obj["offsets"], obj["radii"], obj["colors"])


def default_skeleton() -> SkeletonSpec:
    """15-joint figure, about 1.75 m tall, pelvis 1 m above the ground."""
    skin, shirt, trousers = (0.92, 0.72, 0.58), (0.2, 0.45, 0.85), (0.25, 0.25, 0.3)
    left, right = (0.85, 0.3, 0.25), (0.3, 0.75, 0.35)
    table = [
        ("pelvis", -1, (0.0, 1.0, 0.0), 0.10, trousers),
        ("neck", 0, (0.0, 0.52, 0.0), 0.13, shirt),
        ("head", 1, (0.0, 0.2, 0.02), 0.09, skin),
        ("l_shoulder", 1, (0.19, -0.04, 0.0), 0.05, shirt),
        ("l_elbow", 3, (0.0, -0.28, 0.0), 0.045, left),
        ("l_wrist", 4, (0.0, -0.25, 0.0), 0.04, skin),
        ("r_shoulder", 1, (-0.19, -0.04, 0.0), 0.05, shirt),
        ("r_elbow", 6, (0.0, -0.28, 0.0), 0.045, right),
        ("r_wrist", 7, (0.0, -0.25, 0.0), 0.04, skin),
        ("l_hip", 0, (0.1, -0.06, 0.0), 0.07, trousers),
        ("l_knee", 9, (0.0, -0.42, 0.0), 0.06, left),
        ("l_ankle", 10, (0.0, -0.4, 0.0), 0.05, trousers),
        ("r_hip", 0, (-0.1, -0.06, 0.0), 0.07, trousers),
        ("r_knee", 12, (0.0, -0.42, 0.0), 0.06, right),
        ("r_ankle", 13, (0.0, -0.4, 0.0), 0.05, trousers),
    ]
    names, parents, offsets, radii, colors = zip(*table)
    return SkeletonSpec(names, parents, offsets, radii, colors)


# ----------------------------------------------------------------- motion


@dataclass
class MotionClip:
    fps: float
    rotations: np.ndarray  # (F, J, 3) axis-angle relative to rest
    speed: float = 1.0

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.ndim != 3 or self.rotations.shape[0] < 1 or self.rotations.shape[2] != 3:
            raise ValueError("clip rotations must be (frames >= 1, joints, 3)")
        if not np.all(np.isfinite(self.rotations)):
            raise ValueError("clip rotations must be finite")

    @property
    def frames(self):
        return self.rotations.shape[0]


# (joint, axis, amplitude rad, centre rad) for the default figure's swinging limbs
_SWING = {
    "l_shoulder": ((1, 0, 0), 0.9, 0.0),
    "r_shoulder": ((1, 0, 0), 0.9, 0.0),
    "l_elbow": ((1, 0, 0), 0.6, -0.7),
    "r_elbow": ((1, 0, 0), 0.6, -0.7),
    "l_hip": ((1, 0, 0), 0.55, 0.0),
    "r_hip": ((1, 0, 0), 0.55, 0.0),
    "l_knee": ((1, 0, 0), 0.5, 0.55),
    "r_knee": ((1, 0, 0), 0.5, 0.55),
    "neck": ((0, 1, 0), 0.25, 0.0),
    "head": ((1, 0, 0), 0.2, 0.0),
    "pelvis": ((0, 1, 0), 0.35, 0.0),
}


def resolve_speed(speed) -> float:
    if isinstance(speed, str):
        if speed not in SPEED_PRESETS:
            raise ValueError(f"unknown speed preset {speed!r}; expected one of {sorted(SPEED_PRESETS)}")
        return SPEED_PRESETS[speed]
    speed = float(speed)
    if speed <= 0:
        raise ValueError("speed multiplier must be positive")
    return speed


def motion_angles(skeleton: SkeletonSpec, phase, seed=0):
    """Axis-angle rotations (len(phase), J, 3) of the base motion at ``phase`` seconds.

    Clips sample this at ``phase = speed * t / fps``, so the speed multiplier
    only changes how many frames a given arc takes.
    """
    rng = np.random.default_rng(seed)
    phase = np.atleast_1d(np.asarray(phase, dtype=np.float64))
    out = np.zeros((phase.size, len(skeleton), 3))
    base_freq = rng.uniform(0.7, 1.0)
    for j, name in enumerate(skeleton.names):
        if name in _SWING:
            axis, amp, centre = _SWING[name]
        else:
            axis, amp, centre = (1, 0, 0), 0.15, 0.0
        amp = amp * rng.uniform(0.8, 1.2)
        freq = base_freq * rng.uniform(0.9, 1.1)
        offset = np.pi if name.startswith("r_") else 0.0
        ang = centre + amp * np.sin(2 * np.pi * freq * phase + offset + rng.uniform(-0.3, 0.3))
        out[:, j, :] = np.asarray(axis, dtype=np.float64) * ang[:, None]
    return out


def make_clip(skeleton: SkeletonSpec, frames, speed="medium", fps=30.0, seed=0) -> MotionClip:
    s = resolve_speed(speed)
    phase = s * np.arange(int(frames)) / fps
    return MotionClip(float(fps), motion_angles(skeleton, phase, seed), s)


def animate(skeleton: SkeletonSpec, clip: MotionClip, t) -> JointSet:
    """Forward kinematics: world joint positions at frame ``t``."""
    if not 0 <= t < clip.frames:
        raise ValueError(f"frame {t} outside clip of {clip.frames} frames")
    rot = clip.rotations[t]
    if rot.shape[0] != len(skeleton):
        raise ValueError("clip joint count does not match the skeleton")
    n = len(skeleton)
    glob = [None] * n
    pos = np.zeros((n, 3))
    for j in range(n):
        local = Rotation.from_rotvec(rot[j]).as_matrix()
        p = skeleton.parents[j]
        if p < 0:
            glob[j] = local
            pos[j] = skeleton.offsets[j]
        else:
            glob[j] = glob[p] @ local
            pos[j] = pos[p] + glob[p] @ skeleton.offsets[j]
    return JointSet(tuple(skeleton.names), pos, np.ones(n, dtype=bool))


# -------------------------------------------------------------------- rig


def build_rig(n_cameras, radius=3.0, height=1.0, look_at=(0.0, 0.95, 0.0), resolution=128, focal_scale=1.1,
              span=360.0):
    """Cameras on a horizontal circle, ordered by azimuth, all aimed at ``look_at``.

    With ``span`` = 360 the azimuths are 360/n apart.  A smaller span places
    the cameras on an arc of that many degrees, endpoints included.
    """
    if n_cameras < 2:
        raise ValueError(f"a rig needs at least 2 cameras, got {n_cameras}")
    if not 0 < span <= 360:
        raise ValueError("span must lie in (0, 360] degrees")
    res = int(resolution)
    f = focal_scale * res
    k = Intrinsics(f, f, (res - 1) / 2.0, (res - 1) / 2.0, res, res)
    if span == 360:
        az = np.arange(n_cameras) * (2 * np.pi / n_cameras)
    else:
        az = np.deg2rad(np.linspace(-span / 2, span / 2, n_cameras))
    target = np.asarray(look_at, dtype=np.float64)
    cams = []
    for a in az:
        eye = np.array([target[0] + radius * np.sin(a), height, target[2] + radius * np.cos(a)])
        cams.append(Camera.look_at(eye, target, k))
    return cams


def nominal_baseline(cameras) -> float:
    """Mean distance between azimuth-adjacent cameras."""
    c = np.array([cam.center for cam in cameras])
    return float(np.mean(np.linalg.norm(np.diff(c, axis=0), axis=1)))


# ------------------------------------------------------------- rendering


def _capsule_hits(ro, rd, pa, pb, r):
    """Distance along unit rays ``rd`` (N, 3) from ``ro`` to a capsule; inf on a miss."""
    ba = pb - pa
    oa = ro - pa
    baba = ba @ ba
    bard = rd @ ba
    baoa = oa @ ba
    rdoa = rd @ oa
    oaoa = oa @ oa
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - r * r * baba
    h = b * b - a * c
    t = np.full(rd.shape[0], np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        body_t = (-b - np.sqrt(np.maximum(h, 0.0))) / a
        y = baoa + body_t * bard
        body = (h >= 0) & (a > 1e-12) & (y > 0) & (y < baba)
        t[body] = body_t[body]
        # spherical caps
        for centre in (pa, pb):
            oc = ro - centre
            bb = rd @ oc
            cc = oc @ oc - r * r
            hh = bb * bb - cc
            cap_t = -bb - np.sqrt(np.maximum(hh, 0.0))
            ok = (hh >= 0) & (cap_t > 0)
            t = np.where(ok & (cap_t < t), cap_t, t)
    t[t <= 0] = np.inf
    return t


def capsule_signed_distance(points, pa, pb, r):
    p = np.asarray(points, dtype=np.float64)
    ba = pb - pa
    s = np.clip(((p - pa) @ ba) / (ba @ ba), 0.0, 1.0)
    q = pa + s[..., None] * ba
    return np.linalg.norm(p - q, axis=-1) - r


def render_gt(joints: JointSet, skeleton: SkeletonSpec, camera: Camera, background=(0.0, 0.0, 0.0)):
    """Ray-trace the capsule figure: returns (rgb (H, W, 3), depth (H, W), mask (H, W))."""
    h, w = camera.height, camera.width
    rays = pixel_rays(camera).reshape(-1, 3)
    norm = np.linalg.norm(rays, axis=1)
    rd = (rays / norm[:, None]) @ camera.pose.rotation
    ro = camera.center
    best = np.full(rd.shape[0], np.inf)
    which = np.full(rd.shape[0], -1)
    pos = joints.positions
    for p, j in skeleton.bones():
        t = _capsule_hits(ro, rd, pos[p], pos[j], skeleton.radii[j])
        closer = t < best
        best[closer] = t[closer]
        which[closer] = j
    hit = np.isfinite(best)
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (rd.shape[0], 3)).copy()
    depth = np.zeros(rd.shape[0])
    if hit.any():
        tb = best[hit]
        pts = ro + rd[hit] * tb[:, None]
        jj = which[hit]
        pa = pos[np.asarray(skeleton.parents)[jj]]
        pb = pos[jj]
        ba = pb - pa
        s = np.clip(np.einsum("ij,ij->i", pts - pa, ba) / np.einsum("ij,ij->i", ba, ba), 0.0, 1.0)
        nrm = pts - (pa + s[:, None] * ba)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        shade = AMBIENT + (1 - AMBIENT) * np.maximum(nrm @ LIGHT_DIR, 0.0)
        rgb[hit] = skeleton.colors[jj] * shade[:, None]
        depth[hit] = tb / norm[hit]
    return rgb.reshape(h, w, 3), depth.reshape(h, w), hit.reshape(h, w).astype(np.uint8)


@dataclass
class SceneFrame:
    rgb: list  # per camera (H, W, 3) in [0, 1]
    depth: list  # per camera (H, W) metres, 0 = no hit
    mask: list  # per camera (H, W) uint8 {0, 1}
    joints2d: np.ndarray  # (C, J, 2)
    joints3d: np.ndarray  # (J, 3)
    names: tuple = field(default_factory=tuple)

    def joint_set(self) -> JointSet:
        names = self.names or tuple(f"j{i}" for i in range(len(self.joints3d)))
        return JointSet(names, self.joints3d, np.ones(len(self.joints3d), dtype=bool))


def render_frame(joints: JointSet, skeleton, cameras, background=(0.0, 0.0, 0.0)) -> SceneFrame:
    rgb, depth, mask, j2d = [], [], [], []
    for cam in cameras:
        c, d, m = render_gt(joints, skeleton, cam, background)
        rgb.append(c)
        depth.append(d)
        mask.append(m)
        j2d.append(project(joints.positions, cam).pixel)
    return SceneFrame(rgb, depth, mask, np.array(j2d), joints.positions.copy(), tuple(joints.names))


def generate(skeleton, clip: MotionClip, cameras, background=(0.0, 0.0, 0.0)):
    return [render_frame(animate(skeleton, clip, t), skeleton, cameras, background) for t in range(clip.frames)]


# -------------------------------------------------------------- dataset


@dataclass
class Dataset:
    frames: list
    cameras: list
    skeleton: SkeletonSpec
    fps: float
    baseline: float
    background: tuple = (0.0, 0.0, 0.0)


def _png_write(path, arr):
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def write_dataset(frames, cameras, skeleton: SkeletonSpec, path, fps=30.0, background=(0.0, 0.0, 0.0), extra=None):
    """Write PNG/binary frames plus ``manifest.json``; ``extra`` adds keys to the manifest."""
    os.makedirs(path, exist_ok=True)
    manifest = dict(extra or {})
    manifest |= {
        "format_version": FORMAT_VERSION,
        "cameras": [c.to_json() for c in cameras],
        "joint_names": list(skeleton.names),
        "skeleton": skeleton.to_json(),
        "frame_count": len(frames),
        "fps": float(fps),
        "nominal_baseline": nominal_baseline(cameras),
        "background": [float(v) for v in background],
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    for fi, fr in enumerate(frames):
        for ci in range(len(cameras)):
            rgb8 = np.clip(np.rint(fr.rgb[ci] * 255.0), 0, 255).astype(np.uint8)
            _png_write(os.path.join(path, f"rgb_{fi:04d}_{ci:02d}.png"), rgb8)
            _png_write(os.path.join(path, f"mask_{fi:04d}_{ci:02d}.png"), (fr.mask[ci] > 0).astype(np.uint8) * 255)
            np.asarray(fr.depth[ci], dtype="<f4").tofile(os.path.join(path, f"depth_{fi:04d}_{ci:02d}.bin"))
        with open(os.path.join(path, f"joints_{fi:04d}.json"), "w") as f:
            json.dump({"joints3d": fr.joints3d.tolist(), "joints2d": np.asarray(fr.joints2d).tolist()}, f)


def _need(path):
    if not os.path.isfile(path):
        raise DatasetError(f"missing dataset file: {path}")
    return path


def read_dataset(path) -> Dataset:
    mpath = _need(os.path.join(path, "manifest.json"))
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {mpath}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: dataset format version {version} unsupported (expected {FORMAT_VERSION})")
    cameras = [Camera.from_json(c) for c in manifest["cameras"]]
    skeleton = SkeletonSpec.from_json(manifest["skeleton"])
    frames = []
    for fi in range(int(manifest["frame_count"])):
        rgb, depth, mask = [], [], []
        for ci, cam in enumerate(cameras):
            h, w = cam.height, cam.width
            p = _need(os.path.join(path, f"rgb_{fi:04d}_{ci:02d}.png"))
            try:
                img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
                m = np.asarray(Image.open(_need(os.path.join(path, f"mask_{fi:04d}_{ci:02d}.png"))))
            except OSError as e:
                raise DatasetError(f"unreadable image near {p}: {e}") from e
            dp = _need(os.path.join(path, f"depth_{fi:04d}_{ci:02d}.bin"))
            d = np.fromfile(dp, dtype="<f4")
            if d.size != h * w or img.shape[:2] != (h, w):
                raise DatasetError(f"{dp}: size does not match the {w}x{h} camera")
            rgb.append(img)
            depth.append(d.reshape(h, w))
            mask.append((m > 127).astype(np.uint8))
        jp = _need(os.path.join(path, f"joints_{fi:04d}.json"))
        try:
            with open(jp) as f:
                js = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"corrupt joints file {jp}: {e}") from e
        frames.append(
            SceneFrame(rgb, depth, mask, np.asarray(js["joints2d"]), np.asarray(js["joints3d"]), tuple(skeleton.names))
        )
    return Dataset(frames, cameras, skeleton, float(manifest["fps"]), float(manifest["nominal_baseline"]),
                   tuple(manifest.get("background", (0.0, 0.0, 0.0))))
