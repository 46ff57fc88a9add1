"""Desk-scale toy scenes and the comparison runs built on them.

These are small enough to finish on one CPU core in minutes and are shared by
the scripts in ``scripts/`` and the acceptance tests.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .metrics import evaluate_sequence, mse, psnr_from_mse
from .render import RenderConfig, render_image
from .scene import Emitter, SyntheticSceneSpec, ring_rig, synthesize_dataset
from .train import Model, TrainConfig, train

DESK_FRAMES = 16
DESK_SIZE = 24
DESK_VIEWS = 5
DESK_HELDOUT = 2  # middle of the arc, so it interpolates between trained views


def overfit_scene() -> SyntheticSceneSpec:
    return SyntheticSceneSpec(static=(
        Emitter((0.0, 0.0, 0.0), 0.8, 8.0, (0.9, 0.3, 0.2)),
        Emitter((0.6, 0.5, 0.3), 0.4, 8.0, (0.2, 0.8, 0.3)),
    ))


def overfit_config(seed: int = 0, iters: int = 2000) -> TrainConfig:
    return TrainConfig(seed=seed, width=32, latent_dim=8, batch_size=256, n_coarse=32, n_fine=32,
                       uniform_iters=iters, uniform_lr=5e-3, precision="float32")


@dataclass
class OverfitResult:
    psnr: float
    train_seconds: float
    model: Model


def overfit(seed: int = 0, iters: int = 2000, on_iteration=None) -> OverfitResult:
    """Single frame, 4 views at 32x32, W=32 and D=8; PSNR over the training views."""
    cams = ring_rig(4, 32, radius=4.0, height=0.8)
    video = synthesize_dataset(overfit_scene(), cams, 1, 256)
    cfg = overfit_config(seed, iters)
    t0 = time.perf_counter()
    model, _ = train(video, cfg, "uniform", on_iteration=on_iteration)
    secs = time.perf_counter() - t0
    rc = RenderConfig(cfg.n_coarse, cfg.n_fine, deterministic=True)
    err = np.mean([mse(render_image(model.params, model.latents, 0.0, c, rc), video.frames[v, 0])
                   for v, c in enumerate(cams)])
    return OverfitResult(psnr_from_mse(err)[0], secs, model)


def moving_scene(frames: int = DESK_FRAMES, revolutions: float = 3.0) -> SyntheticSceneSpec:
    """Two static spheres and one sphere orbiting in front of them.

    Three revolutions over the clip is faster than a low-frequency encoding of
    t can follow, which is the regime where per-frame codes pay off.
    """
    rate = 2 * np.pi * revolutions / max(frames - 1, 1)
    return SyntheticSceneSpec(
        static=(
            Emitter((0.0, 0.0, 0.6), 0.9, 6.0, (0.25, 0.35, 0.8)),
            Emitter((0.7, 0.55, 0.2), 0.35, 8.0, (0.9, 0.85, 0.2)),
        ),
        dynamic=(
            Emitter((0.0, 0.0, -0.5), 0.3, 10.0, (0.95, 0.2, 0.15),
                    {"kind": "circular", "orbit_radius": 0.6, "angular_rate": rate, "phase": 0.0, "plane": "xy"}),
        ),
    )


def sliding_scene(frames: int = DESK_FRAMES, distance: float = 1.2, static: bool = True) -> SyntheticSceneSpec:
    """One sphere moving along +x at constant speed, optionally in front of the static spheres."""
    speed = distance / max(frames - 1, 1)
    mover = Emitter((-distance / 2, -0.35, -0.4), 0.35, 10.0, (0.95, 0.2, 0.15),
                    {"kind": "linear", "velocity": [speed, 0.0, 0.0]})
    return SyntheticSceneSpec(static=moving_scene().static if static else (), dynamic=(mover,))


def moving_video(frames: int = DESK_FRAMES, size: int = DESK_SIZE, samples: int = 128, spec=None):
    cams = ring_rig(DESK_VIEWS, size, radius=4.0, height=0.6)
    ids = [f"cam{i}" for i in range(DESK_VIEWS)]
    return synthesize_dataset(spec or moving_scene(frames), cams, frames, samples, view_ids=ids,
                              heldout_view_ids=[ids[DESK_HELDOUT]])


def desk_config(seed: int = 0, iters: int = 1200, **kw) -> TrainConfig:
    """Matched budget: uniform and NeRF-T run ``iters``; isg and nois split it between keyframe and full stages."""
    base = dict(seed=seed, width=32, latent_dim=8, L_x=6, L_d=2, L_t=4, batch_size=128, n_coarse=16,
                n_fine=16, keyframe_interval=4, uniform_iters=iters, uniform_lr=5e-3, keyframe_iters=iters // 2,
                keyframe_lr=5e-3, isg_iters=iters - iters // 2, isg_lr=5e-3, ist_iters=0,
                precision="float32")
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class RunResult:
    strategy: str
    seed: int
    psnr: float
    dynamic_mse: float
    train_seconds: float


def run(video, strategy: str, cfg: TrainConfig) -> RunResult:
    t0 = time.perf_counter()
    model, _ = train(video, cfg, strategy)
    secs = time.perf_counter() - t0
    model = dataclasses.replace(model, render=RenderConfig(cfg.n_coarse, cfg.n_fine, True))
    rep = evaluate_sequence(model, video, video.heldout_view_ids[0])
    return RunResult(strategy, cfg.seed, rep.mean_psnr, rep.mean_masked_mse, secs)
