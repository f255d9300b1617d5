"""Evaluation, the overfit probe, the temporal ablation and the three sweeps."""

from __future__ import annotations

import time

import numpy as np

from ..objectives import MetricReport, epe_1px, psnr, ssim
from .config import ModelConfig
from .model import forward, init_weights, make_tps_states
from .train import TrainState, make_sample, train

# (beta, gamma, lambda) rows of the loss-weight ablation
LOSS_SWEEP_ROWS = (
    (0.5, 0.5, 0.0),
    (0.3, 0.7, 0.0),
    (0.8, 0.2, 0.0),
    (0.5, 0.5, 0.1),
    (0.5, 0.5, 0.5),
    (0.5, 0.5, 1.0),
)
# (pose_in_depth, pose_in_skips)
POSE_ARMS = ((True, True), (True, False), (False, True), (False, False))


def model_predictor(weights, config: ModelConfig):
    def predict(sample, tps_states):
        out = forward(sample.batch, sample.target_camera, weights, config, tps_states, sample.background)
        return np.clip(out.image.data, 0.0, 1.0), out.lift_depth.data
    return predict


def oracle_predictor(dataset, config: ModelConfig):
    """Returns the ground truth itself; used to sanity-check the metric plumbing."""
    def predict(sample, tps_states):
        return sample.target_image, sample.source_depth
    return predict


def _jitter_rng(seed, frame):
    return np.random.default_rng([int(seed), int(frame)])


def evaluate(weights, dataset, config: ModelConfig, target_views=(1,), source_ids=(0, 2), jitter_px=0.0, seed=0,
             frames=None, predictor=None):
    """Render every frame for each target view and score it.

    Returns ``(rows, summary)``: one row per (frame, view) and one
    :class:`MetricReport` per view.  TPS state persists across the frames of
    a view, mirroring causal streaming use.  Joint jitter is seeded per
    (seed, frame) so arms that differ only in configuration see identical
    noise.
    """
    n_cams = len(dataset.cameras)
    for v in list(target_views) + list(source_ids):
        if not 0 <= v < n_cams:
            raise ValueError(f"view {v} not present (dataset has {n_cams} cameras)")
    if predictor is None:
        predictor = model_predictor(weights, config)
    frames = range(len(dataset.frames)) if frames is None else frames
    rows, summary = [], {}
    for view in target_views:
        tps = make_tps_states(config, len(source_ids))
        preds, gts, view_rows = [], [], []
        for f in frames:
            sample = make_sample(dataset, f, config, source_ids, view, jitter_px, _jitter_rng(seed, f))
            image, lift = predictor(sample, tps)
            masks = sample.batch.masks > 0
            if masks.any():
                fx = sample.batch.cameras[0].resized(config.resolution, config.resolution).intrinsics.fx
                epe, pct = epe_1px(lift, sample.source_depth, masks, fx, dataset.baseline)
            else:
                epe, pct = float("nan"), float("nan")
            preds.append(image)
            gts.append(sample.target_image)
            view_rows.append({"frame": f, "view": view, "psnr": psnr(image, sample.target_image),
                              "ssim": ssim(image, sample.target_image), "epe": epe, "pct_1px": pct})
        scores = np.array([r["ssim"] for r in view_rows])
        d = np.abs(np.diff(scores)) if scores.size > 1 else np.zeros(1)
        mu, sigma = float(d.mean()), float(d.std())
        for r in view_rows:
            r["mu_dssim"], r["sigma_dssim"] = mu, sigma
        rows.extend(view_rows)
        summary[view] = MetricReport(
            float(np.mean([r["psnr"] for r in view_rows])), float(scores.mean()), mu, sigma,
            float(np.nanmean([r["epe"] for r in view_rows])), float(np.nanmean([r["pct_1px"] for r in view_rows])),
        )
    return rows, summary


def overfit_probe(dataset, config: ModelConfig, steps=2000, frame=0, source_ids=(0, 2), target_id=1, log_every=50,
                  log=None, weights=None):
    """Train from scratch on one scene; PSNR/SSIM of the held target view every ``log_every`` steps."""
    weights = init_weights(config) if weights is None else weights
    state = TrainState.fresh(weights, config.seed)
    sample = make_sample(dataset, frame, config, source_ids, target_id)
    predict = model_predictor(weights, config)
    curve = []
    t0 = time.perf_counter()

    def measure():
        image, _ = predict(sample, None)
        point = {"step": state.step, "psnr": psnr(image, sample.target_image),
                 "ssim": ssim(image, sample.target_image), "wall_s": time.perf_counter() - t0}
        curve.append(point)
        if log is not None:
            log(point)

    measure()
    while state.step < steps:
        chunk = min(log_every, steps - state.step)
        train(weights, state, [sample], config, chunk)
        measure()
    return {"curve": curve, "psnr": curve[-1]["psnr"], "ssim": curve[-1]["ssim"], "weights": weights,
            "state": state, "wall_s": time.perf_counter() - t0}


def smoothed_curve(values, window=5):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def train_on_frames(dataset, config: ModelConfig, steps, frames=None, source_ids=(0, 2), target_id=1,
                    weights=None, log=None, sequential=False):
    weights = init_weights(config) if weights is None else weights
    state = TrainState.fresh(weights, config.seed)
    frames = range(len(dataset.frames)) if frames is None else frames
    samples = [make_sample(dataset, f, config, source_ids, target_id) for f in frames]
    train(weights, state, samples, config, steps, log=log, sequential=sequential)
    return weights, state


def temporal_ablation(weights, dataset, config: ModelConfig, seeds=range(10), jitter_px=2.0, omegas=(0.8, 1.0),
                      target_views=(1,), source_ids=(0, 2)):
    """mu(dSSIM) per seed for each TPS blend factor on jittered joints."""
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for om in omegas:
            _, summary = evaluate(weights, dataset, config.replace(omega=om), target_views, source_ids, jitter_px, seed)
            row[f"mu_dssim_omega_{om}"] = float(np.mean([m.mu_dssim for m in summary.values()]))
            row[f"sigma_dssim_omega_{om}"] = float(np.mean([m.sigma_dssim for m in summary.values()]))
        rows.append(row)
    return rows


def _train_and_score(dataset, config, steps, frames, source_ids, target_id):
    weights, _ = train_on_frames(dataset, config, steps, frames, source_ids, target_id)
    _, summary = evaluate(weights, dataset, config, (target_id,), source_ids, frames=frames)
    return weights, summary[target_id]


def fusion_sweep(dataset, config: ModelConfig, steps, frames=(0,), source_ids=(0, 2), target_id=1, strategies=None):
    from ..fusion import STRATEGIES

    rows = []
    for name in strategies or STRATEGIES:
        cfg = config.replace(fusion=name)
        weights, m = _train_and_score(dataset, cfg, steps, frames, source_ids, target_id)
        rows.append({"fusion": name, "epe": m.epe, "pct_1px": m.pct_1px, "psnr": m.psnr, "ssim": m.ssim,
                     "params": weights.param_count()})
    return rows


def loss_sweep(dataset, config: ModelConfig, steps, frames=(0,), source_ids=(0, 2), target_id=1,
               rows_spec=LOSS_SWEEP_ROWS):
    """One row per (beta, gamma, lambda); EPE stands in for the perceptual metric."""
    rows = []
    for beta, gamma, lam in rows_spec:
        cfg = config.replace(beta=beta, gamma=gamma, lam=lam)
        _, m = _train_and_score(dataset, cfg, steps, frames, source_ids, target_id)
        rows.append({"beta": beta, "gamma": gamma, "lambda": lam, "psnr": m.psnr, "ssim": m.ssim, "epe": m.epe})
    return rows


def pose_sweep(dataset, config: ModelConfig, steps, frames=(0,), source_ids=(0, 2), target_id=1):
    rows = []
    for in_depth, in_skips in POSE_ARMS:
        cfg = config.replace(pose_in_depth=in_depth, pose_in_skips=in_skips)
        _, m = _train_and_score(dataset, cfg, steps, frames, source_ids, target_id)
        rows.append({"pose_in_depth": in_depth, "pose_in_skips": in_skips, "psnr": m.psnr, "ssim": m.ssim,
                     "epe": m.epe, "pct_1px": m.pct_1px})
    return rows
