"""posegauss command line: gen, train, render, eval, bench, ablate.

Every command takes ``--config file.json``; keys there override built-in
defaults and explicit flags override the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("posegauss")

# run-level keys shared by the commands, beyond the model configuration
RUN_DEFAULTS = {
    "data": "data",
    "out": "out",
    "steps": 200,
    "train_frames": "0",
    "source_views": "0,2",
    "target_views": "1",
    "jitter": 0.0,
    "log_every": 50,
    "threads": None,
}
RUN_HELP = {
    "data": "dataset directory",
    "out": "output directory (or file for CSV-only commands)",
    "steps": "optimizer steps",
    "train_frames": "comma list of frame indices, or 'all'",
    "source_views": "comma list of source camera indices",
    "target_views": "comma list of held-out target camera indices",
    "jitter": "std of joint jitter in full-resolution pixels",
    "log_every": "steps between probe measurements",
    "threads": "worker threads (default: $POSEGAUSS_THREADS, else 1)",
}


class UsageError(Exception):
    pass


def _model_fields():
    from .pipeline import ModelConfig

    return [(f.name, f.default) for f in dataclasses.fields(ModelConfig)]


def _parse_bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _parse_tuple(s):
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).split(","))


def _typed(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        return _parse_tuple
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    g = p.add_argument_group("model configuration")
    for name, default in _model_fields():
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_typed(default), default=None,
                       help=f"(default: {shown})")
    r = p.add_argument_group("run configuration")
    for name, default in RUN_DEFAULTS.items():
        typ = int if name in ("steps", "log_every", "threads") else float if name == "jitter" else str
        r.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None,
                       help=f"{RUN_HELP[name]} (default: {default})")


def resolve_config(args):
    """(ModelConfig, run dict) from defaults, the JSON file and the flags, in that order."""
    from .pipeline import ModelConfig

    model_keys = {n for n, _ in _model_fields()}
    merged_model, run = {}, dict(RUN_DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        unknown = sorted(set(file_cfg) - model_keys - set(RUN_DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys in {args.config}: {unknown}")
        for k, v in file_cfg.items():
            if k in model_keys:
                merged_model[k] = v
            else:
                run[k] = v
    for k in model_keys:
        v = getattr(args, k, None)
        if v is not None:
            merged_model[k] = v
    for k in RUN_DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            run[k] = v
    try:
        cfg = ModelConfig(**merged_model)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid model configuration: {e}") from e
    return cfg, run


def _int_list(s, n_all=None):
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    if str(s) == "all":
        return list(range(n_all))
    return [int(v) for v in str(s).split(",") if v != ""]


def setup_threads(requested=None):
    """Cap numba and BLAS workers; returns the effective count."""
    import numba
    from threadpoolctl import threadpool_limits

    if requested is None:
        env = os.environ.get("POSEGAUSS_THREADS")
        requested = int(env) if env else 1
    n = max(1, min(int(requested), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    threadpool_limits(n)
    return n


def _write_csv(path, rows, fields=None):
    if not rows:
        raise UsageError("nothing to write")
    fields = fields or list(rows[0])
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _load_dataset(path):
    from .synthrig import DatasetError, read_dataset

    try:
        return read_dataset(path)
    except DatasetError as e:
        raise UsageError(str(e)) from e


def _load_ckpt(path, cfg=None):
    from .pipeline import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path, cfg)
    except CheckpointError as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    from .synthrig import build_rig, default_skeleton, generate, make_clip, resolve_speed, write_dataset

    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.cams < 2:
        raise UsageError("--cams must be >= 2")
    sk = default_skeleton()
    cams = build_rig(args.cams, radius=args.radius, resolution=args.res, span=args.span)
    try:
        speed = resolve_speed(args.speed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    clip = make_clip(sk, args.frames, speed, seed=args.seed)
    frames = generate(sk, clip, cams)
    try:
        write_dataset(frames, cams, sk, args.out, fps=clip.fps,
                      extra={"speed": speed, "speed_preset": str(args.speed), "seed": args.seed})
    except OSError as e:
        raise UsageError(f"cannot write dataset to {args.out}: {e}") from e
    log.info("wrote %d frames x %d cameras to %s", args.frames, args.cams, args.out)
    print(json.dumps({"out": args.out, "frames": args.frames, "cameras": args.cams, "speed": speed}))


def cmd_train(args):
    from .pipeline import TrainState, init_weights, make_sample, save_checkpoint, train

    cfg, run = resolve_config(args)
    setup_threads(run["threads"])
    if args.resume:
        weights, state, cfg = _load_ckpt(args.resume)
    else:
        weights = init_weights(cfg)
        state = TrainState.fresh(weights, cfg.seed)
    ds = _load_dataset(run["data"])
    frames = _int_list(run["train_frames"], len(ds.frames))
    src = _int_list(run["source_views"])
    tgt = _int_list(run["target_views"])
    try:
        samples = [make_sample(ds, f, cfg, src, t) for f in frames for t in tgt]
    except (ValueError, IndexError) as e:
        raise UsageError(str(e)) from e
    os.makedirs(run["out"], exist_ok=True)
    loss_rows, time_rows = [], []

    def record(row):
        loss_rows.append({k: row[k] for k in ("step", "render", "depth", "pose_fusion", "total")})
        time_rows.append({"step": row["step"], "wall_ms": row["wall_ms"]})
        if row["step"] % max(1, run["log_every"]) == 0:
            log.info("step %d total %.5f", row["step"], row["total"])

    from .pipeline import NonFiniteLoss

    try:
        train(weights, state, samples, cfg, int(run["steps"]), log=record)
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    ckpt = os.path.join(run["out"], "checkpoint.bin")
    save_checkpoint(weights, state, cfg, ckpt)
    if loss_rows:
        _write_csv(os.path.join(run["out"], "train_log.csv"), loss_rows)
        _write_csv(os.path.join(run["out"], "train_timing.csv"), time_rows)
    print(json.dumps({"checkpoint": ckpt, "step": state.step}))
    return 0


def cmd_render(args):
    from PIL import Image

    from .geometry import Camera
    from .pipeline import forward, make_sample
    _, run = resolve_config(args)
    setup_threads(run["threads"])
    weights, _, cfg = _load_ckpt(args.checkpoint)
    ds = _load_dataset(run["data"])
    src = _int_list(run["source_views"])
    if not 0 <= args.frame < len(ds.frames):
        raise UsageError(f"frame {args.frame} outside dataset of {len(ds.frames)} frames")
    sample = make_sample(ds, args.frame, cfg, src, src[0])
    if args.view is not None:
        if not 0 <= args.view < len(ds.cameras):
            raise UsageError(f"view {args.view} not in dataset")
        cams = [ds.cameras[args.view]]
    else:
        try:
            lo, hi = (float(v) for v in args.azimuth.split(":"))
        except ValueError as e:
            raise UsageError(f"--azimuth expects lo:hi in degrees, got {args.azimuth!r}") from e
        ref = ds.cameras[0]
        target = np.array([0.0, 0.95, 0.0])
        offset = ref.center - target
        radius = float(np.hypot(offset[0], offset[2]))
        cams = []
        for i in range(args.n):
            a = np.deg2rad(lo + (hi - lo) * i / args.n)
            eye = target + np.array([radius * np.sin(a), offset[1], radius * np.cos(a)])
            cams.append(Camera.look_at(eye, target, ref.intrinsics))
    os.makedirs(run["out"], exist_ok=True)
    paths = []
    for i, cam in enumerate(cams):
        out = forward(sample.batch, cam.resized(cfg.resolution, cfg.resolution), weights, cfg, None, sample.background)
        img = np.clip(np.rint(out.image.data * 255.0), 0, 255).astype(np.uint8)
        p = os.path.join(run["out"], f"render_{i:03d}.png")
        Image.fromarray(img).save(p, format="PNG")
        paths.append(p)
    print(json.dumps({"images": paths}))
    return 0


def cmd_eval(args):
    from .pipeline import evaluate, oracle_predictor

    cfg, run = resolve_config(args)
    setup_threads(run["threads"])
    ds = _load_dataset(run["data"])
    if args.gt_self:
        weights = None
        predictor = oracle_predictor(ds, cfg)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --gt-self)")
        weights, _, cfg = _load_ckpt(args.checkpoint)
        predictor = None
    if args.tps_off:
        cfg = cfg.replace(omega=1.0)
    try:
        rows, _ = evaluate(weights, ds, cfg, _int_list(run["target_views"]), _int_list(run["source_views"]),
                           float(run["jitter"]), cfg.seed, predictor=predictor)
    except ValueError as e:
        raise UsageError(str(e)) from e
    fields = ["frame", "view", "psnr", "ssim", "mu_dssim", "sigma_dssim", "epe", "pct_1px"]
    out = run["out"] if run["out"].endswith(".csv") else os.path.join(run["out"], "metrics.csv")
    _write_csv(out, rows, fields)
    print(json.dumps({"csv": out, "rows": len(rows)}))
    return 0


def cmd_bench(args):
    from .splatter import bench

    if args.n_gaussians < 0:
        raise UsageError("--n-gaussians must be >= 0")
    threads = _int_list(args.threads_list)
    rows = []
    for t in threads:
        eff = setup_threads(t)
        row = bench(args.n_gaussians, args.res, args.res, eff, frames=args.frames, seed=args.seed)
        row["threads"], row["threads_effective"] = t, eff
        rows.append(row)
        log.info("threads %d: %.2f ms/frame", eff, row["ms_per_frame_mean"])
    fields = ["n_gaussians", "width", "height", "threads", "threads_effective", "ms_per_frame_mean",
              "ms_per_frame_p95"]
    out = args.out if args.out.endswith(".csv") else os.path.join(args.out, "bench.csv")
    _write_csv(out, rows, fields)
    status = 0
    if args.baseline:
        status = check_regression(rows, args.baseline, args.tolerance)
    print(json.dumps({"csv": out, "rows": len(rows), "regression": status != 0}))
    return status


def check_regression(rows, baseline_path, tolerance=0.2):
    """Nonzero when any (n, size, threads) row is more than ``tolerance`` slower than the baseline."""
    with open(baseline_path) as f:
        base = {(int(r["n_gaussians"]), int(r["width"]), int(r["height"]), int(r["threads"])):
                float(r["ms_per_frame_mean"]) for r in csv.DictReader(f)}
    bad = 0
    for r in rows:
        key = (r["n_gaussians"], r["width"], r["height"], r["threads"])
        if key in base and r["ms_per_frame_mean"] > base[key] * (1.0 + tolerance):
            log.error("regression at %s: %.2f ms vs baseline %.2f ms", key, r["ms_per_frame_mean"], base[key])
            bad += 1
    return 4 if bad else 0


def cmd_ablate(args):
    from .pipeline import fusion_sweep, loss_sweep, pose_sweep, temporal_ablation, train_on_frames

    cfg, run = resolve_config(args)
    setup_threads(run["threads"])
    ds = _load_dataset(run["data"])
    frames = _int_list(run["train_frames"], len(ds.frames))
    src = _int_list(run["source_views"])
    tgt = _int_list(run["target_views"])[0]
    steps = int(run["steps"])
    if args.kind == "fusion":
        rows = fusion_sweep(ds, cfg, steps, frames, src, tgt)
    elif args.kind == "loss":
        rows = loss_sweep(ds, cfg, steps, frames, src, tgt)
    elif args.kind == "pose":
        rows = pose_sweep(ds, cfg, steps, frames, src, tgt)
    else:
        weights, _ = train_on_frames(ds, cfg, steps, frames, src, tgt, sequential=True)
        rows = temporal_ablation(weights, ds, cfg, range(args.seeds), float(run["jitter"]) or 2.0,
                                 target_views=(tgt,), source_ids=src)
    out = run["out"] if run["out"].endswith(".csv") else os.path.join(run["out"], f"ablate_{args.kind}.csv")
    _write_csv(out, rows)
    print(json.dumps({"csv": out, "rows": len(rows)}))
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="posegauss", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic multi-view dataset")
    g.add_argument("--frames", type=int, default=64, help="frame count (default: 64)")
    g.add_argument("--cams", type=int, default=3, help="camera count (default: 3)")
    g.add_argument("--res", type=int, default=128, help="square resolution (default: 128)")
    g.add_argument("--speed", default="medium", help="slow|medium|fast or a multiplier (default: medium)")
    g.add_argument("--seed", type=int, default=0, help="motion seed (default: 0)")
    g.add_argument("--span", type=float, default=60.0, help="rig arc in degrees, 360 for a full ring (default: 60)")
    g.add_argument("--radius", type=float, default=3.0, help="rig radius in metres (default: 3.0)")
    g.add_argument("--out", default="data", help="dataset directory (default: data)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model, writing a checkpoint and a loss log")
    _add_config_args(t)
    t.add_argument("--resume", help="checkpoint to continue from (its config wins)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    _add_config_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--frame", type=int, default=0, help="dataset frame supplying the sources (default: 0)")
    r.add_argument("--view", type=int, default=None, help="render this dataset camera instead of a sweep")
    r.add_argument("--azimuth", default="0:360", help="sweep range lo:hi in degrees (default: 0:360)")
    r.add_argument("--n", type=int, default=8, help="number of sweep views (default: 8)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="metrics CSV for held-out views")
    _add_config_args(e)
    e.add_argument("--checkpoint")
    e.add_argument("--tps-off", action="store_true", help="disable temporal smoothing (omega = 1)")
    e.add_argument("--gt-self", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="rasterizer throughput CSV")
    b.add_argument("--n-gaussians", type=int, default=16384, help="(default: 16384)")
    b.add_argument("--res", type=int, default=256, help="(default: 256)")
    b.add_argument("--threads-list", default="1,2,4,8", help="thread counts to sweep (default: 1,2,4,8)")
    b.add_argument("--frames", type=int, default=20, help="timed frames per row (default: 20)")
    b.add_argument("--seed", type=int, default=0, help="(default: 0)")
    b.add_argument("--out", default="bench.csv", help="(default: bench.csv)")
    b.add_argument("--baseline", help="baseline CSV; exit 4 on regression")
    b.add_argument("--tolerance", type=float, default=0.2, help="allowed slowdown fraction (default: 0.2)")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="fusion, loss-weight, pose-wiring or temporal sweeps")
    a.add_argument("kind", choices=("fusion", "loss", "pose", "temporal"))
    _add_config_args(a)
    a.add_argument("--seeds", type=int, default=10, help="temporal: jitter seeds (default: 10)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    import warnings

    warnings.filterwarnings("ignore", module="numba")
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        status = args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
