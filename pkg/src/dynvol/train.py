"""Training loop: photometric loss, Adam, latent projection, keyframe-to-full schedule, checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .field import (
    EncodingConfig,
    FieldParams,
    LatentTable,
    RayBatch,
    gradients,
    init_field,
    init_latents,
    param_names,
    project_latents,
)
from .geometry import camera_rays
from .render import RenderConfig
from .sampling import (
    build_frame_sampler,
    cached_isg_weights,
    draw_rays,
    global_median_maps,
    isg_weights,
    ist_weight_map,
    pick_ist_partner,
)

log = logging.getLogger(__name__)

STRATEGIES = ("is*", "isg", "ist", "nois", "uniform", "nerf-t")


@dataclass
class TrainConfig:
    seed: int = 0
    width: int = 64
    latent_dim: int = 32
    L_x: int = 10
    L_d: int = 4
    L_t: int = 4
    include_input: bool = True
    n_coarse: int = 32
    n_fine: int = 64
    batch_size: int = 1024
    keyframe_interval: int = 30
    latent_lr_mult: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    keyframe_iters: int = 3000
    keyframe_lr: float = 5e-4
    isg_iters: int = 2500
    isg_lr: float = 1e-4
    ist_iters: int = 1000
    ist_lr: float = 1e-5
    uniform_iters: int = 3000
    uniform_lr: float = 5e-4
    gamma_keyframe: float = 1e-3
    gamma_full: float = 2e-2
    alpha: float = 0.1
    ist_window: int = 25
    ist_clamp: str = "lower"
    downsample: int = 4
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.keyframe_interval < 1:
            raise ValueError("keyframe_interval must be >= 1")
        for name in ("keyframe_lr", "isg_lr", "ist_lr", "uniform_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("keyframe_iters", "isg_iters", "ist_iters", "uniform_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.L_x, self.L_d, self.L_t, self.include_input)

    @property
    def render(self) -> RenderConfig:
        return RenderConfig(self.n_coarse, self.n_fine)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()


def _coerce(f: dataclasses.Field, raw: str):
    typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if typ is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key '{f.name}': expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ValueError(f"config key '{f.name}': cannot parse {raw!r} as {typ.__name__}") from None


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {n}: unknown key '{key}'")
        out[key] = _coerce(fields[key], val)
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


@dataclass(frozen=True)
class Stage:
    name: str          # keyframe | full_isg | full_ist | full_uniform
    iterations: int
    lr: float
    strategy: str      # isg | ist | uniform
    param: float = 0.0  # gamma for isg, alpha for ist


def build_stages(cfg: TrainConfig, strategy: str) -> list[Stage]:
    key = Stage("keyframe", cfg.keyframe_iters, cfg.keyframe_lr, "isg", cfg.gamma_keyframe)
    isg = Stage("full_isg", cfg.isg_iters, cfg.isg_lr, "isg", cfg.gamma_full)
    ist = Stage("full_ist", cfg.ist_iters, cfg.ist_lr, "ist", cfg.alpha)
    uni = Stage("full_uniform", cfg.uniform_iters, cfg.uniform_lr, "uniform")
    # hierarchical baseline: same keyframe stage, then random rays on the ISG stage's budget
    nois = Stage("full_uniform", cfg.isg_iters, cfg.isg_lr, "uniform")
    table = {"is*": [key, isg, ist], "isg": [key, isg], "ist": [key, ist], "nois": [key, nois],
             "uniform": [uni], "nerf-t": [uni]}
    if strategy not in table:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return table[strategy]


# ------------------------------------------------------------------- pieces

def photometric_loss(pred_coarse, pred_fine, target) -> float:
    """Summed squared error of both levels; rows are rays."""
    pc = np.asarray(pred_coarse, dtype=np.float64)
    pf = np.asarray(pred_fine, dtype=np.float64)
    tg = np.asarray(target, dtype=np.float64)
    return float(np.sum((pc - tg) ** 2) + np.sum((pf - tg) ** 2))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    m_lat: np.ndarray | None
    v_lat: np.ndarray | None
    step: int = 0


def init_optimizer(params: FieldParams, latents: LatentTable | None) -> OptimizerState:
    m = {k: np.zeros_like(a) for k, a in params.tensors()}
    v = {k: np.zeros_like(a) for k, a in params.tensors()}
    ml = None if latents is None else np.zeros_like(latents.codes)
    vl = None if latents is None else np.zeros_like(latents.codes)
    return OptimizerState(m, v, ml, vl, 0)


def adam_step(params: FieldParams, latents: LatentTable | None, grads, state: OptimizerState,
              lr: float, latent_lr_mult: float = 10.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; latent rows use ``lr * latent_lr_mult``.

    Latent rows that moved are re-projected to unit norm; rows with no gradient
    history are left bit-identical. Returns new (params, latents, state).
    """
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step

    def upd(x, g, m, v, rate):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        return x - rate * (m / c1) / (np.sqrt(v / c2) + eps), m, v

    new_m, new_v, nets = {}, {}, {}
    for level in ("coarse", "fine"):
        net, gnet = params.network(level), grads.network(level)
        out = {}
        for name in param_names():
            key = f"{level}.{name}"
            out[name], new_m[key], new_v[key] = upd(net[name], gnet[name], state.m[key], state.v[key], lr)
        nets[level] = out
    new_params = params.with_networks(nets["coarse"], nets["fine"])

    new_lat, ml, vl = latents, state.m_lat, state.v_lat
    if latents is not None:
        codes, ml, vl = upd(latents.codes, grads.latents, state.m_lat, state.v_lat, lr * latent_lr_mult)
        moved = np.flatnonzero(np.any(codes != latents.codes, axis=1))
        codes = np.where(np.any(codes != latents.codes, axis=1)[:, None], codes, latents.codes)
        new_lat = project_latents(LatentTable(codes), rows=moved) if moved.size else LatentTable(codes)
    return new_params, new_lat, OptimizerState(new_m, new_v, ml, vl, step)


def keyframe_indices(T: int, K: int) -> np.ndarray:
    return np.arange(0, T, K)


def expand_latent_table(keyframes: LatentTable, K: int, T: int) -> LatentTable:
    """Per-frame codes from keyframe codes at frames 0, K, 2K, ...

    Frames between two keyframes get the linear blend; frames past the last
    keyframe copy it.
    """
    if keyframes.T == 0:
        raise ValueError("empty keyframe table")
    kc = keyframes.codes
    out = np.empty((T, kc.shape[1]))
    for t in range(T):
        i = t // K
        if i >= kc.shape[0] - 1:
            out[t] = kc[min(i, kc.shape[0] - 1)]
            continue
        lam = (t - i * K) / K
        out[t] = kc[i] if lam == 0 else (1.0 - lam) * kc[i] + lam * kc[i + 1]
    return LatentTable(out)


# ------------------------------------------------------------------- model

@dataclass
class Model:
    params: FieldParams
    latents: LatentTable | None
    render: RenderConfig = RenderConfig()
    stage_index: int = 0
    iteration: int = 0


@dataclass
class TrainStats:
    stage: str
    losses: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    wall_time: float = 0.0


class RayPool:
    """Per-pixel rays and colors of the training views, indexed by (view, row, col)."""

    def __init__(self, video, views):
        self.video = video
        self.views = list(views)
        rays = [camera_rays(video.cameras[v]) for v in self.views]
        self.origins = np.stack([r[0] for r in rays])
        self.dirs = np.stack([r[1] for r in rays])
        self.near = np.array([video.cameras[v].near for v in self.views])
        self.far = np.array([video.cameras[v].far for v in self.views])
        self.frames = video.frames[self.views]  # (V, T, H, W, 3)

    @property
    def shape(self):
        return self.origins.shape[:3]

    def batch(self, idx: np.ndarray, t: int) -> RayBatch:
        v, r, c = idx[:, 0], idx[:, 1], idx[:, 2]
        return RayBatch(
            origins=self.origins[v, r, c],
            dirs=self.dirs[v, r, c],
            near=self.near[v],
            far=self.far[v],
            times=np.full(len(idx), float(t)),
            targets=self.frames[v, t, r, c],
        )


def new_model(cfg: TrainConfig, n_frames: int, cond: str = "latent") -> Model:
    params = init_field(cfg.encoding, cfg.width, cfg.latent_dim, cond=cond, n_frames=n_frames, seed=cfg.seed)
    latents = init_latents(n_frames, cfg.latent_dim, seed=cfg.seed + 1) if cond == "latent" else None
    return Model(params, latents, cfg.render)


def run_stage(model: Model, pool: RayPool, stage: Stage, cfg: TrainConfig, rng,
              weights=None, on_iteration=None) -> tuple[Model, TrainStats]:
    """Run ``stage.iterations`` steps: pick a frame, draw a ray batch, step Adam.

    ``weights`` is the (V, T, H, W) ISG weight array for isg stages. Keyframe
    stages restrict frames to multiples of the keyframe interval.
    """
    T = pool.frames.shape[1]
    frames = keyframe_indices(T, cfg.keyframe_interval) if stage.name == "keyframe" else np.arange(T)
    if stage.strategy == "isg" and weights is None:
        raise ValueError(f"stage {stage.name} needs ISG weight maps")
    stats = TrainStats(stage.name)
    state = init_optimizer(model.params, model.latents)
    params, latents = model.params, model.latents
    samplers = {}
    n_rays = int(np.prod(pool.shape))
    start = time.perf_counter()
    for it in range(stage.iterations):
        t = int(frames[rng.integers(len(frames))])
        if stage.strategy == "isg":
            if t not in samplers:
                samplers[t] = build_frame_sampler(weights[:, t], t)
            idx = draw_rays(samplers[t], cfg.batch_size, rng)
        elif stage.strategy == "ist":
            j = pick_ist_partner(t, T, rng, cfg.ist_window)
            if j is None:
                idx = np.stack(np.unravel_index(rng.integers(n_rays, size=cfg.batch_size), pool.shape), axis=1)
            else:
                w = ist_weight_map(pool.frames[:, t], pool.frames[:, j], stage.param, cfg.ist_clamp)
                idx = draw_rays(build_frame_sampler(w, t), cfg.batch_size, rng)
        else:
            idx = np.stack(np.unravel_index(rng.integers(n_rays, size=cfg.batch_size), pool.shape), axis=1)
        batch = pool.batch(idx, t)
        gs = gradients(params, latents, batch, model.render, rng, dtype=np.dtype(cfg.precision))
        if not np.isfinite(gs.loss):
            raise FloatingPointError(f"non-finite loss at stage {stage.name} iteration {it} (frame {t})")
        params, latents, state = adam_step(params, latents, gs, state, stage.lr, cfg.latent_lr_mult,
                                           cfg.beta1, cfg.beta2, cfg.adam_eps)
        stats.losses.append(gs.loss / len(batch))
        stats.frames.append(t)
        if on_iteration is not None:
            on_iteration(stage, it, gs.loss / len(batch))
    stats.wall_time = time.perf_counter() - start
    out = replace(model, params=params, latents=latents, iteration=stage.iterations)
    return out, stats


def train(video, cfg: TrainConfig, strategy: str = "is*", *, cache_dir=None, stage_filter=None,
          on_stage_end=None, on_iteration=None) -> tuple[Model, list[TrainStats]]:
    """Run the full stage sequence for ``strategy`` on the training views of ``video``.

    ``on_stage_end(model, stage_index, stage, stats, rng)`` is called after
    each stage (the CLI writes checkpoints there).
    """
    cond = "time" if strategy == "nerf-t" else "latent"
    stages = build_stages(cfg, strategy)
    views = video.train_views
    pool = RayPool(video, views)
    model = new_model(cfg, video.T, cond)
    rng = np.random.default_rng(cfg.seed)
    all_stats = []
    isg_cache = {}

    def isg_for(gamma):
        if gamma not in isg_cache:
            if cache_dir is not None:
                w, _, _ = cached_isg_weights(video, cache_dir, gamma, cfg.downsample, views)
            else:
                w = isg_weights(video, global_median_maps(video, cfg.downsample, views), gamma, views)
            isg_cache[gamma] = w.weights
        return isg_cache[gamma]

    for si, stage in enumerate(stages):
        if stage_filter and stage.name not in stage_filter:
            continue
        log.info("stage %d/%d %s: %d iterations, lr %g, sampling %s", si + 1, len(stages), stage.name,
                 stage.iterations, stage.lr, stage.strategy)
        if stage.name != "keyframe" and si > 0 and stages[si - 1].name == "keyframe" and model.latents is not None:
            keys = keyframe_indices(video.T, cfg.keyframe_interval)
            expanded = expand_latent_table(LatentTable(model.latents.codes[keys]), cfg.keyframe_interval, video.T)
            model = replace(model, latents=project_latents(expanded))
        weights = isg_for(stage.param) if stage.strategy == "isg" else None
        model = replace(model, stage_index=si)
        model, stats = run_stage(model, pool, stage, cfg, rng, weights, on_iteration)
        all_stats.append(stats)
        if on_stage_end is not None:
            on_stage_end(model, si, stage, stats, rng)
    return model, all_stats


# -------------------------------------------------------------- checkpoints

_MAGIC = b"DYNF"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI IIIIIIBB IIB IQ 32s")
_COND_CODES = {"latent": 0, "time": 1}


@dataclass
class Checkpoint:
    params: FieldParams
    latents: LatentTable | None
    render: RenderConfig = RenderConfig()
    config_digest: bytes = b"\0" * 32
    stage_index: int = 0
    iteration: int = 0
    rng_state: dict | None = None

    @property
    def model(self) -> Model:
        return Model(self.params, self.latents, self.render, self.stage_index, self.iteration)


def _pack_rng(state: dict | None) -> bytes:
    if state is None:
        return b""
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported RNG {state.get('bit_generator')}")
    s = state["state"]
    mask = (1 << 64) - 1
    return struct.pack("<QQQQII", s["state"] & mask, s["state"] >> 64, s["inc"] & mask, s["inc"] >> 64,
                       state["has_uint32"], state["uinteger"])


def _unpack_rng(blob: bytes) -> dict | None:
    if not blob:
        return None
    s_lo, s_hi, i_lo, i_hi, has, uint = struct.unpack("<QQQQII", blob)
    return {"bit_generator": "PCG64", "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
            "has_uint32": has, "uinteger": uint}


def checkpoint_tensors(params: FieldParams, latents: LatentTable | None):
    tensors = [a for _, a in params.tensors()]
    if latents is not None:
        tensors.append(latents.codes)
    return tensors


def save_checkpoint(ckpt: Checkpoint, path):
    p, enc, r = ckpt.params, ckpt.params.enc, ckpt.render
    header = _CKPT_HEADER.pack(
        _MAGIC, _CKPT_VERSION,
        p.width, p.latent_dim, p.n_frames, enc.L_x, enc.L_d, enc.L_t, int(enc.include_input), _COND_CODES[p.cond],
        r.n_coarse, r.n_fine, int(r.deterministic),
        ckpt.stage_index, ckpt.iteration, ckpt.config_digest,
    )
    rng_blob = _pack_rng(ckpt.rng_state)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        for a in checkpoint_tensors(p, ckpt.latents):
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(rng_blob)))
        f.write(rng_blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    (magic, version, width, latent_dim, n_frames, L_x, L_d, L_t, inc, cond_code,
     n_coarse, n_fine, det, stage_index, iteration, digest) = _CKPT_HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cond = {v: k for k, v in _COND_CODES.items()}.get(cond_code)
    if cond is None:
        raise ValueError(f"{path}: unknown conditioning code {cond_code}")
    enc = EncodingConfig(L_x, L_d, L_t, bool(inc))
    proto = init_field(enc, width, latent_dim, cond=cond, n_frames=n_frames)
    off = _CKPT_HEADER.size
    nets = {"coarse": {}, "fine": {}}

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) * 4
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint (tensor data ends early)")
        a = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=off).astype(np.float64).reshape(shape)
        off += n
        return a

    for level in ("coarse", "fine"):
        ref = proto.network(level)
        for name in param_names():
            nets[level][name] = take(ref[name].shape)
    latents = LatentTable(take((n_frames, latent_dim))) if cond == "latent" else None
    if off + 4 > len(raw):
        raise ValueError(f"{path}: truncated checkpoint (missing RNG block)")
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + blob_len != len(raw):
        raise ValueError(f"{path}: checkpoint length mismatch")
    rng_state = _unpack_rng(raw[off:off + blob_len])
    params = proto.with_networks(nets["coarse"], nets["fine"])
    return Checkpoint(params, latents, RenderConfig(n_coarse, n_fine, bool(det)), digest,
                      stage_index, iteration, rng_state)
