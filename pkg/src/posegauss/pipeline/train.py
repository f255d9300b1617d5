"""Losses for one step, the Adam update, the training loop and checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .. import tensorcore as tc
from ..objectives import LossReport, depth_loss, pose_fusion_loss, render_loss, total_loss
from ..posekit import JointSet
from .config import ModelConfig
from .model import ForwardOutput, ModelWeights, SourceBatch, forward, init_weights, make_tps_states

CHECKPOINT_VERSION = 1
ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class NonFiniteLoss(FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite {component} loss ({value}); step aborted")
        self.component = component


@dataclass
class Sample:
    """Everything one training step needs: sources, target view and supervision."""

    batch: SourceBatch
    target_camera: object
    target_image: np.ndarray  # (H, W, 3)
    source_depth: np.ndarray  # (S, H, W) ground truth, 0 off the figure
    background: tuple = (0.0, 0.0, 0.0)


@dataclass
class TrainState:
    step: int
    m: list
    v: list
    rng_state: dict | None = None

    @classmethod
    def fresh(cls, weights: ModelWeights, seed=0):
        params = [p for _, p in weights.named_params()]
        rng = np.random.default_rng(seed)
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   rng.bit_generator.state)


# ------------------------------------------------------------------ data


def _resize_image(img, res):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == res:
        return img
    x = img if img.ndim == 3 else img[..., None]
    out = tc.resize_bilinear(tc.Tensor(x), res, res).data
    return out if img.ndim == 3 else out[..., 0]


def _resize_nearest(a, res):
    a = np.asarray(a)
    if a.shape[0] == res:
        return a
    idx = (np.arange(res) + 0.5) * a.shape[0] / res
    idx = np.minimum(idx.astype(int), a.shape[0] - 1)
    return a[np.ix_(idx, idx)]


def make_sample(dataset, frame, config: ModelConfig, source_ids=(0, 2), target_id=1, jitter_px=0.0, rng=None):
    """Assemble a :class:`Sample` from a dataset frame, resampled to the model resolution.

    ``jitter_px`` adds Gaussian noise of that many full-resolution pixels to
    each source view's projected joints (detector-like jitter).
    """
    fr = dataset.frames[frame]
    n_cams = len(dataset.cameras)
    for v in list(source_ids) + [target_id]:
        if not 0 <= v < n_cams:
            raise ValueError(f"view {v} not in dataset with {n_cams} cameras")
    res = config.resolution
    joints = JointSet(tuple(dataset.skeleton.names), fr.joints3d, np.ones(len(fr.joints3d), dtype=bool))
    jitter = None
    if jitter_px > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        jitter = rng.normal(0.0, jitter_px, (len(source_ids), len(joints), 2))
    batch = SourceBatch(
        np.stack([_resize_image(fr.rgb[v], res) for v in source_ids]),
        np.stack([_resize_nearest(fr.mask[v], res) for v in source_ids]),
        [dataset.cameras[v] for v in source_ids],
        joints,
        jitter,
    )
    depth = np.stack([_resize_nearest(fr.depth[v], res) for v in source_ids]).astype(np.float64)
    return Sample(batch, dataset.cameras[target_id].resized(res, res), _resize_image(fr.rgb[target_id], res), depth,
                  tuple(dataset.background))


# ------------------------------------------------------------------ loss


def compute_losses(out: ForwardOutput, sample: Sample, config: ModelConfig) -> LossReport:
    w = config.loss_weights
    dt = config.np_dtype
    l_render = render_loss(out.image, sample.target_image.astype(dt), w.beta, w.gamma)
    res = config.resolution
    mask = np.asarray(sample.batch.masks) > 0
    gt = sample.source_depth.astype(dt)
    stages = []
    for d in out.stages:
        up = tc.resize_bilinear(d.reshape(d.shape + (1,)), res, res)
        stages.append(up.reshape(up.shape[:-1]))
    l_depth = depth_loss(stages, gt, mask, w.mu) + depth_loss([out.lift_depth], gt, mask, 1.0)
    l_pose = pose_fusion_loss(out.f_joint, out.f_pose, w.lam)
    return total_loss(l_render, l_depth, l_pose)


def check_finite(report: LossReport):
    for name in ("render", "depth", "pose_fusion"):
        v = getattr(report, name)
        if not np.isfinite(v):
            raise NonFiniteLoss(name, v)


# ------------------------------------------------------------- optimizer


def adam_update(weights: ModelWeights, state: TrainState, lr):
    params = [p for _, p in weights.named_params()]
    t = state.step + 1
    c1 = 1.0 - ADAM_B1**t
    c2 = 1.0 - ADAM_B2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= ADAM_B1
        m += (1.0 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1.0 - ADAM_B2) * g * g
        if lr:
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.data.dtype)
    state.step = t


def loss_and_grads(weights: ModelWeights, sample: Sample, config: ModelConfig, tps_states=None):
    tc.zero_grads(weights)
    with tc.Tape() as tape:
        out = forward(sample.batch, sample.target_camera, weights, config, tps_states, sample.background)
        report = compute_losses(out, sample, config)
    check_finite(report)
    tc.backprop(tape, output=report.objective)
    return report, out


def train_step(state: TrainState, weights: ModelWeights, sample: Sample, config: ModelConfig):
    """forward, loss, backprop and one Adam update; mutates and returns (state, weights, report)."""
    report, _ = loss_and_grads(weights, sample, config)
    adam_update(weights, state, config.lr)
    return state, weights, report


def train(weights, state, samples, config: ModelConfig, steps, log=None, callback=None, sequential=False):
    """Cycle through ``samples`` for ``steps`` updates; ``log`` receives CSV-ready dicts.

    With ``sequential`` the samples are consecutive frames of one clip: TPS
    state carries from each frame to the next and resets when the cycle wraps,
    so the pose branch trains on the smoothed heatmaps it sees at inference.
    """
    tps = None
    for i in range(steps):
        t0 = time.perf_counter()
        k = state.step % len(samples)
        sample = samples[k]
        if sequential and (k == 0 or tps is None):
            tps = make_tps_states(config, len(sample.batch.cameras))
        rep, _ = loss_and_grads(weights, sample, config, tps if sequential else None)
        adam_update(weights, state, config.lr)
        row = {
            "step": state.step,
            "render": rep.render,
            "depth": rep.depth,
            "pose_fusion": rep.pose_fusion,
            "total": rep.total,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        if log is not None:
            log(row)
        if callback is not None:
            callback(state, weights)
    return state, weights


# ------------------------------------------------------------ checkpoints


def save_checkpoint(weights: ModelWeights, state: TrainState, config: ModelConfig, path):
    """u64 header length, JSON header, then u64-length-prefixed float32 blobs.

    Blob order: every parameter in canonical order, then the Adam first and
    second moments in the same order.
    """
    named = weights.named_params()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": int(state.step),
        "params": [[n, list(p.shape)] for n, p in named],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for arr in [p.data for _, p in named] + list(state.m) + list(state.v):
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Returns (weights, state, config); rejects version, shape or config mismatches."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated before header")
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    try:
        header = json.loads(raw[8:8 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('format_version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if header["config"].get(k) != v)
        raise CheckpointError(f"{path}: config mismatch on keys {diff}")
    weights = init_weights(config)
    named = weights.named_params()
    stored = header["params"]
    if [n for n, _ in stored] != [n for n, _ in named]:
        raise CheckpointError(f"{path}: parameter list does not match the model built from its config")
    off = 8 + hlen
    labels = [n for n, _ in named] + [f"adam.m.{n}" for n, _ in named] + [f"adam.v.{n}" for n, _ in named]
    shapes = [p.shape for _, p in named] * 3
    arrays = []
    for label, shape in zip(labels, shapes):
        if off + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated, blob {label!r} missing")
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated inside blob {label!r}")
        if n != 4 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: blob {label!r} has {n} bytes, expected shape {shape}")
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n // 4, offset=off).reshape(shape))
        off += n
    k = len(named)
    for (_, p), a in zip(named, arrays[:k]):
        p.data[...] = a
    dt = config.np_dtype
    state = TrainState(int(header["step"]), [a.astype(dt) for a in arrays[k:2 * k]],
                       [a.astype(dt) for a in arrays[2 * k:]])
    return weights, state, config
