"""Command-line entry point: synth, precompute-weights, train, render, eval, info."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, sampling, scene, train
from .geometry import spiral_trajectory
from .render import RenderConfig, render_image

log = logging.getLogger("dynvol")


class CLIError(Exception):
    pass


def _warn(msg: str):
    print(f"warning: {msg}", file=sys.stderr)


def _info(msg: str):
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ parsing

def _common(defaults: bool) -> argparse.ArgumentParser:
    """Global flags, accepted before or after the subcommand."""
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", help="training config file (key = value lines)", **({"default": None} | kw))
    p.add_argument("--seed", type=int, help="random seed", **({"default": None} | kw))
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)",
                   **({"default": os.cpu_count() or 1} | kw))
    p.add_argument("--deterministic", action="store_true", help="midpoint sampling instead of jitter",
                   **({"default": False} | kw))
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging", **({"default": False} | kw))
    return p


def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(train.TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        typ = {"int": int, "float": float, "str": str, "bool": str}[f.type if isinstance(f.type, str)
                                                                   else f.type.__name__]
        g.add_argument(flag, dest=f"cfg_{f.name}", type=typ, default=None, metavar=f.name.upper(),
                       help=f"(default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynvol", parents=[_common(True)],
                                     description="Dynamic radiance fields with per-frame latent codes.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(False)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic multi-view dataset")
    p.add_argument("--scene", required=True, help="scene spec JSON")
    p.add_argument("--cameras", required=True, help="camera JSON array")
    p.add_argument("--frames", type=int, required=True, help="number of frames T")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--samples", type=int, default=256, help="quadrature samples per ray")
    p.add_argument("--heldout", action="append", default=[], help="held-out view id (repeatable)")
    p.add_argument("--fps", type=float, default=30.0)

    p = sub.add_parser("precompute-weights", parents=[common], help="cache median and ISG weight maps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--cache", required=True, help="cache directory")
    p.add_argument("--gamma", type=float, action="append", help="ISG gamma (repeatable; default: both stage values)")
    p.add_argument("--downsample", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="run the staged training schedule")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--strategy", choices=train.STRATEGIES, default="is*")
    p.add_argument("--stage", action="append", default=None,
                   choices=("keyframe", "full_isg", "full_ist", "full_uniform"), help="run only these stages")
    p.add_argument("--cache", default=None, help="weight-map cache directory (default: OUT/cache)")
    _add_config_flags(p)

    p = sub.add_parser("render", parents=[common], help="render images from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", help="dataset directory supplying the cameras")
    p.add_argument("--cameras", help="camera JSON array (alternative to --dataset)")
    pose = p.add_mutually_exclusive_group()
    pose.add_argument("--camera", type=int, default=None, help="camera index")
    pose.add_argument("--spiral", type=int, default=None, help="number of spiral poses")
    p.add_argument("--time", default="0", help="time t or range a..b")
    p.add_argument("--step", type=float, default=1.0, help="time step for ranges")
    p.add_argument("--out", required=True, help="output image directory")

    p = sub.add_parser("eval", parents=[common], help="score the held-out view")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--heldout", default=None, help="held-out view id (default: from dataset meta)")
    p.add_argument("--out", default=None, help="report CSV path")
    p.add_argument("--stride", type=int, default=None, help="evaluate every n-th frame")
    p.add_argument("--mask-threshold", type=float, default=0.1, help="dynamic-mask ISG threshold")

    p = sub.add_parser("info", parents=[common], help="describe a checkpoint or dataset")
    p.add_argument("path")
    return parser


def _config(args) -> train.TrainConfig:
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    fields = {f.name: f for f in dataclasses.fields(train.TrainConfig)}
    over = {k: train._coerce(fields[k], v) for k, v in over.items()}
    if args.seed is not None:
        over["seed"] = args.seed
    return train.load_config(args.config, **over)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    spec = scene.load_scene_spec(args.scene)
    cams, ids = scene.load_cameras(args.cameras)
    for h in args.heldout:
        if h not in ids:
            raise CLIError(f"held-out view {h!r} not among camera ids {ids}")
    video = scene.synthesize_dataset(spec, cams, args.frames, args.samples, args.out, fps=args.fps,
                                     view_ids=ids, heldout_view_ids=args.heldout, threads=args.threads)
    print(f"V={video.V} T={video.T} resolution={video.width}x{video.height} -> {args.out}")
    return 0


def cmd_precompute(args) -> int:
    video = scene.load_dataset(args.dataset)
    cfg = _config(args)
    gammas = args.gamma or sorted({cfg.gamma_keyframe, cfg.gamma_full})
    ds = args.downsample or cfg.downsample
    for g in gammas:
        _, _, recomputed = sampling.cached_isg_weights(video, args.cache, g, ds, video.train_views)
        _info(f"gamma {g:g}: {'computed' if recomputed else 'cached'}")
    return 0


def cmd_train(args) -> int:
    video = scene.load_dataset(args.dataset)
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    stages = train.build_stages(cfg, args.strategy)
    _info("stages: " + " -> ".join(s.name for s in stages if not args.stage or s.name in args.stage))
    loss_log = out / "loss.csv"
    with open(loss_log, "w", newline="") as f:
        csv.writer(f).writerow(["stage", "iteration", "frame", "loss"])

    def on_iteration(stage, it, loss):
        if it % 100 == 0 or it == stage.iterations - 1:
            _info(f"[{stage.name}] iter {it + 1}/{stage.iterations} loss {loss:.6f}")

    def on_stage_end(model, si, stage, stats, rng):
        ckpt = train.Checkpoint(model.params, model.latents, model.render, cfg.digest(), si,
                                stage.iterations, rng.bit_generator.state)
        path = out / f"stage{si}_{stage.name}.dynf"
        train.save_checkpoint(ckpt, path)
        train.save_checkpoint(ckpt, out / "final.dynf")
        with open(loss_log, "a", newline="") as f:
            w = csv.writer(f)
            for i, (fr, l) in enumerate(zip(stats.frames, stats.losses)):
                w.writerow([stage.name, i, fr, f"{l:.8g}"])
        _info(f"stage {stage.name} done in {stats.wall_time:.1f}s -> {path}")

    train.train(video, cfg, args.strategy, cache_dir=args.cache or out / "cache", stage_filter=args.stage,
                on_stage_end=on_stage_end, on_iteration=on_iteration)
    return 0


def parse_times(spec: str, step: float) -> list[float]:
    if ".." in spec:
        a, b = (float(s) for s in spec.split("..", 1))
        if step <= 0:
            raise CLIError("--step must be > 0")
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        if n < 1:
            raise CLIError(f"empty time range {spec}")
        return [a + k * step for k in range(n)]
    return [float(spec)]


def _cameras_for(args):
    if args.dataset:
        return scene.load_cameras(Path(args.dataset) / "cameras.json")[0]
    if args.cameras:
        return scene.load_cameras(args.cameras)[0]
    raise CLIError("render needs --dataset or --cameras to supply camera poses")


def cmd_render(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    cams = _cameras_for(args)
    if args.spiral is not None:
        if args.spiral < 1:
            raise CLIError("--spiral needs at least one pose")
        poses = spiral_trajectory(cams, args.spiral)
    else:
        idx = 0 if args.camera is None else args.camera
        if not 0 <= idx < len(cams):
            raise CLIError(f"camera index {idx} out of range [0, {len(cams)})")
        poses = [cams[idx]]
    T = ckpt.params.n_frames
    times = []
    for t in parse_times(args.time, args.step):
        c = float(np.clip(t, 0, T - 1))
        if c != t:
            _warn(f"time {t:g} outside [0, {T - 1}], clamped to {c:g}")
        times.append(c)
    cfg = RenderConfig(ckpt.render.n_coarse, ckpt.render.n_fine, deterministic=args.deterministic)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for p, cam in enumerate(poses):
        for t in times:
            img = render_image(ckpt.params, ckpt.latents, t, cam, cfg, seed=seed, view=p, threads=args.threads)
            scene.write_png(out / f"pose{p:03d}_t{t:08.3f}.png", img)
            n += 1
    _info(f"wrote {n} images to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    video = scene.load_dataset(args.dataset)
    if ckpt.params.n_frames != video.T:
        raise CLIError(f"checkpoint has {ckpt.params.n_frames} frames, dataset has {video.T}")
    view = args.heldout
    if view is None:
        if not video.heldout_view_ids:
            raise CLIError("dataset names no held-out view; pass --heldout")
        view = video.heldout_view_ids[0]
    if view not in video.view_ids:
        raise CLIError(f"view {view!r} not in dataset (views: {video.view_ids})")
    if view not in video.heldout_view_ids:
        _warn(f"view {view} was used for training")
    model = dataclasses.replace(ckpt.model, render=RenderConfig(ckpt.render.n_coarse, ckpt.render.n_fine, True))
    report = metrics.evaluate_sequence(model, video, video.view_index(view), args.stride,
                                       mask_threshold=args.mask_threshold, threads=args.threads)
    if args.out:
        report.write_csv(args.out)
    print(f"PSNR {report.mean_psnr:.4f} dB  DSSIM {report.mean_dssim:.6f}  frames {len(report.frames)}")
    return 0


def cmd_info(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        video = scene.load_dataset(path)
        print(f"dataset {path}: V={video.V} T={video.T} resolution={video.width}x{video.height} "
              f"fps={video.fps:g} heldout={video.heldout_view_ids} raw_bytes={scene.raw_dataset_bytes(video)}")
        return 0
    ckpt = train.load_checkpoint(path)
    p = ckpt.params
    print(f"checkpoint {path}: cond={p.cond} width={p.width} latent_dim={p.latent_dim} frames={p.n_frames} "
          f"params={p.n_params} bytes={path.stat().st_size} stage={ckpt.stage_index} "
          f"samples={ckpt.render.n_coarse}+{ckpt.render.n_fine}")
    return 0


COMMANDS = {"synth": cmd_synth, "precompute-weights": cmd_precompute, "train": cmd_train,
            "render": cmd_render, "eval": cmd_eval, "info": cmd_info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(message)s")
    if args.threads is None or args.threads < 1:
        args.threads = 1
    try:
        return COMMANDS[args.command](args)
    except (CLIError, ValueError, OSError, KeyError, IndexError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
