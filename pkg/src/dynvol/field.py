"""Latent-conditioned radiance field with exact reverse-mode gradients.

The network maps ``(x, d, cond)`` to ``(rgb, sigma)``: an 8-layer ReLU trunk on
``encode(x) ++ cond`` with the trunk input re-injected at layer 5, a softplus
density head, a linear feature head and a two-layer view branch on
``feature ++ encode(d)`` with a sigmoid output. ``cond`` is either a raw
per-frame latent code or the positionally encoded normalized time (the
time-input baseline). Coarse and fine levels have separate weights and share
the latent table.

Weights are stored ``(fan_in, fan_out)`` so layers compute ``h @ w + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .render import (
    RenderConfig,
    composite_backward,
    composite_batch,
    pdf_resample,
    stratified_samples,
)

N_TRUNK = 8
SKIP_LAYER = 5
LEVELS = ("coarse", "fine")


@dataclass(frozen=True)
class EncodingConfig:
    L_x: int = 10
    L_d: int = 4
    L_t: int = 4
    include_input: bool = True

    def __post_init__(self):
        if min(self.L_x, self.L_d, self.L_t) < 0:
            raise ValueError("frequency counts must be >= 0")

    def dim(self, k: int, L: int) -> int:
        return k * (2 * L + (1 if self.include_input else 0))


def positional_encode(v, L: int, include_input: bool = True, dtype=np.float64) -> np.ndarray:
    """Per coordinate: [p,] sin(2^0 p), cos(2^0 p), ..., sin(2^(L-1) p), cos(2^(L-1) p).

    Higher octaves come from double-angle recurrences in float64 (error grows
    like 2^L ulp, ~1e-13 at L=10), then the result is cast to ``dtype``.
    """
    v = np.asarray(v, dtype=np.float64)
    if L < 0:
        raise ValueError(f"L must be >= 0, got {L}")
    parts = [v] if include_input else []
    if L:
        s, c = np.sin(v), np.cos(v)
        for k in range(L):
            parts += [s, c]
            if k + 1 < L:
                s, c = 2.0 * s * c, (c - s) * (c + s)
    if not parts:
        return np.zeros((*v.shape[:-1], 0), dtype=dtype)
    return np.stack(parts, axis=-1).astype(dtype, copy=False).reshape(*v.shape[:-1], -1)


# --------------------------------------------------------------------- params

@dataclass(frozen=True)
class FieldParams:
    coarse: dict
    fine: dict
    enc: EncodingConfig = EncodingConfig()
    width: int = 64
    cond: str = "latent"  # "latent" | "time"
    latent_dim: int = 32
    n_frames: int = 1

    @property
    def pe_x_dim(self) -> int:
        return self.enc.dim(3, self.enc.L_x)

    @property
    def pe_d_dim(self) -> int:
        return self.enc.dim(3, self.enc.L_d)

    @property
    def cond_dim(self) -> int:
        return self.latent_dim if self.cond == "latent" else self.enc.dim(1, self.enc.L_t)

    def network(self, level: str) -> dict:
        return self.coarse if level == "coarse" else self.fine

    def tensors(self):
        """(name, array) pairs in checkpoint order."""
        for level in LEVELS:
            net = self.network(level)
            for name in param_names():
                yield f"{level}.{name}", net[name]

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.tensors())

    def with_networks(self, coarse: dict, fine: dict) -> "FieldParams":
        return replace(self, coarse=coarse, fine=fine)


def param_names() -> list[str]:
    names = []
    for i in range(N_TRUNK):
        names += [f"trunk.{i}.w", f"trunk.{i}.b"]
    return names + ["sigma.w", "sigma.b", "feat.w", "feat.b", "view.w", "view.b", "rgb.w", "rgb.b"]


def layer_shapes(width: int, in_dim: int, pe_d_dim: int) -> dict:
    half = max(width // 2, 1)
    shapes = {}
    for i in range(N_TRUNK):
        fan_in = in_dim if i == 0 else width + (in_dim if i == SKIP_LAYER else 0)
        shapes[f"trunk.{i}.w"] = (fan_in, width)
        shapes[f"trunk.{i}.b"] = (width,)
    shapes.update({
        "sigma.w": (width, 1), "sigma.b": (1,),
        "feat.w": (width, width), "feat.b": (width,),
        "view.w": (width + pe_d_dim, half), "view.b": (half,),
        "rgb.w": (half, 3), "rgb.b": (3,),
    })
    return shapes


def init_field(enc: EncodingConfig = EncodingConfig(), width: int = 64, latent_dim: int = 32,
               cond: str = "latent", n_frames: int = 1, seed: int = 0) -> FieldParams:
    """Glorot-uniform weights, zero biases; coarse and fine drawn independently."""
    if cond not in ("latent", "time"):
        raise ValueError(f"cond must be 'latent' or 'time', got {cond!r}")
    proto = FieldParams({}, {}, enc, width, cond, latent_dim if cond == "latent" else 0, n_frames)
    shapes = layer_shapes(width, proto.pe_x_dim + proto.cond_dim, proto.pe_d_dim)
    rng = np.random.default_rng(seed)
    nets = []
    for _ in LEVELS:
        net = {}
        for name in param_names():
            shape = shapes[name]
            if name.endswith(".w"):
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                net[name] = rng.uniform(-bound, bound, shape)
            else:
                net[name] = np.zeros(shape)
        nets.append(net)
    return replace(proto, coarse=nets[0], fine=nets[1])


# -------------------------------------------------------------------- latents

@dataclass(frozen=True)
class LatentTable:
    codes: np.ndarray  # (T, D)

    @property
    def T(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]


def project_latents(table: LatentTable, rows=None) -> LatentTable:
    """Rescale rows (all, or the given subset) to unit l2 norm."""
    codes = np.array(table.codes, dtype=np.float64)
    sel = np.arange(codes.shape[0]) if rows is None else np.asarray(rows)
    norms = np.linalg.norm(codes[sel], axis=1)
    if np.any(norms == 0):
        bad = sel[np.flatnonzero(norms == 0)[0]]
        raise ValueError(f"latent row {bad} has zero norm and cannot be normalized")
    codes[sel] = codes[sel] / norms[:, None]
    return LatentTable(codes)


def init_latents(T: int, D: int, seed: int = 0) -> LatentTable:
    """N(0, 0.01/sqrt(D)) entries, independently per frame, projected to unit rows."""
    if T < 1 or D < 1:
        raise ValueError(f"need T >= 1 and D >= 1, got T={T}, D={D}")
    rng = np.random.default_rng(seed)
    codes = rng.normal(0.0, 0.01 / np.sqrt(D), size=(T, D))
    return project_latents(LatentTable(codes))


def latent_blend(T: int, t):
    """Row indices (lo, hi) and blend weights for continuous times, clamped to [0, T-1]."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, T - 1)
    lo = np.floor(t).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    lam = t - lo
    return lo, hi, lam


def latent_at_time(table: LatentTable, t: float) -> np.ndarray:
    lo, hi, lam = latent_blend(table.T, t)
    if lam == 0.0:
        return table.codes[lo].copy()
    return (1.0 - lam) * table.codes[lo] + lam * table.codes[hi]


def time_condition(params: FieldParams, t) -> np.ndarray:
    """Encoded normalized time for the time-input baseline, shape (..., cond_dim)."""
    t = np.asarray(t, dtype=np.float64)
    t_norm = t / (params.n_frames - 1) if params.n_frames > 1 else np.zeros_like(t)
    return positional_encode(t_norm[..., None], params.enc.L_t, params.enc.include_input)


def condition_at_time(params: FieldParams, table: LatentTable | None, t: float) -> np.ndarray:
    if params.cond == "time":
        return time_condition(params, t)
    return latent_at_time(table, t)


# -------------------------------------------------------------------- network

def _first_bad_layer(cache: dict) -> str:
    for i, pre in enumerate(cache["pre"]):
        if not np.all(np.isfinite(pre)):
            return f"trunk.{i}"
    for name, key in (("sigma", "sig_pre"), ("feat", "feat"), ("view", "v_pre"), ("rgb", "rgb_pre")):
        if not np.all(np.isfinite(cache[key])):
            return name
    return "input"


def net_forward(net: dict, pe_x, cond, pe_d, keep: bool = False):
    """Evaluate one network on samples ``pe_x`` (R, N, P) with per-ray ``cond`` (R, C), ``pe_d`` (R, Q).

    Arithmetic runs in the dtype of ``pe_x``. Returns ``rgb`` (R, N, 3),
    ``sigma`` (R, N) and the cache needed by :func:`net_backward`.
    """
    R, N, P = pe_x.shape
    dt = pe_x.dtype
    net = {k: v.astype(dt, copy=False) for k, v in net.items()}
    cond = cond.astype(dt, copy=False)
    pe_d = pe_d.astype(dt, copy=False)
    width = net["trunk.0.b"].shape[0]
    x2 = pe_x.reshape(R * N, P)
    cache = {"x2": x2, "cond": cond, "pe_d": pe_d, "h": [], "pre": [], "shape": (R, N), "net": net}
    h = None
    for i in range(N_TRUNK):
        w, b = net[f"trunk.{i}.w"], net[f"trunk.{i}.b"]
        if i == 0:
            pre = x2 @ w[:P]
            per_ray = cond @ w[P:] + b
        elif i == SKIP_LAYER:
            pre = h @ w[:width] + x2 @ w[width:width + P]
            per_ray = cond @ w[width + P:] + b
        else:
            pre = h @ w
            pre += b
            per_ray = None
        if per_ray is not None:
            pre.reshape(R, N, width)[...] += per_ray[:, None, :]
        cache["h"].append(h)
        cache["pre"].append(pre)
        h = np.maximum(pre, 0)
    sig_pre = (h @ net["sigma.w"])[:, 0] + net["sigma.b"][0]
    sigma = np.logaddexp(0, sig_pre)
    feat = h @ net["feat.w"] + net["feat.b"]
    wv = net["view.w"]
    v_pre = feat @ wv[:width]
    v_pre.reshape(R, N, -1)[...] += (pe_d @ wv[width:] + net["view.b"])[:, None, :]
    v = np.maximum(v_pre, 0)
    rgb_pre = v @ net["rgb.w"] + net["rgb.b"]
    rgb = expit(rgb_pre)
    cache.update(h_top=h, sig_pre=sig_pre, feat=feat, v_pre=v_pre, v=v, rgb=rgb, rgb_pre=rgb_pre)
    if not (np.isfinite(rgb_pre.sum()) and np.isfinite(sig_pre.sum())):
        raise FloatingPointError(f"non-finite activation in layer '{_first_bad_layer(cache)}'")
    out = rgb.reshape(R, N, 3), sigma.reshape(R, N)
    return (*out, cache if keep else None)


def net_backward(net: dict, cache: dict, g_rgb, g_sigma):
    """Reverse pass of :func:`net_forward`. Returns (float64 param grads, d_cond (R, C))."""
    R, N = cache["shape"]
    net = cache["net"]
    x2, cond, pe_d = cache["x2"], cache["cond"], cache["pe_d"]
    dt = x2.dtype
    P = x2.shape[1]
    width = net["trunk.0.b"].shape[0]
    grads = {}

    def ray_sum(a):
        return a.reshape(R, N, -1).sum(axis=1)

    rgb = cache["rgb"]
    d_rgb_pre = g_rgb.reshape(R * N, 3).astype(dt, copy=False) * rgb * (1 - rgb)
    grads["rgb.w"] = cache["v"].T @ d_rgb_pre
    grads["rgb.b"] = d_rgb_pre.sum(axis=0)
    d_v_pre = d_rgb_pre @ net["rgb.w"].T
    d_v_pre *= cache["v_pre"] > 0
    d_v_ray = ray_sum(d_v_pre)
    wv = net["view.w"]
    grads["view.w"] = np.concatenate([cache["feat"].T @ d_v_pre, pe_d.T @ d_v_ray], axis=0)
    grads["view.b"] = d_v_ray.sum(axis=0)
    d_feat = d_v_pre @ wv[:width].T

    h = cache["h_top"]
    grads["feat.w"] = h.T @ d_feat
    grads["feat.b"] = d_feat.sum(axis=0)
    d_sig_pre = (g_sigma.reshape(R * N).astype(dt, copy=False) * expit(cache["sig_pre"]))[:, None]
    grads["sigma.w"] = h.T @ d_sig_pre
    grads["sigma.b"] = d_sig_pre.sum(axis=0)
    dh = d_feat @ net["feat.w"].T
    dh += d_sig_pre @ net["sigma.w"].T

    d_cond = np.zeros(cond.shape, dtype=np.float64)
    for i in reversed(range(N_TRUNK)):
        w = net[f"trunk.{i}.w"]
        d_pre = dh
        d_pre *= cache["pre"][i] > 0
        if i in (0, SKIP_LAYER):
            d_ray = ray_sum(d_pre)
            grads[f"trunk.{i}.b"] = d_ray.sum(axis=0)
        else:
            grads[f"trunk.{i}.b"] = d_pre.sum(axis=0)
        if i == 0:
            grads["trunk.0.w"] = np.concatenate([x2.T @ d_pre, cond.T @ d_ray], axis=0)
            d_cond += d_ray @ w[P:].T
        elif i == SKIP_LAYER:
            grads[f"trunk.{i}.w"] = np.concatenate(
                [cache["h"][i].T @ d_pre, x2.T @ d_pre, cond.T @ d_ray], axis=0)
            d_cond += d_ray @ w[width + P:].T
            dh = d_pre @ w[:width].T
        else:
            grads[f"trunk.{i}.w"] = cache["h"][i].T @ d_pre
            dh = d_pre @ w.T
    grads = {k: v.astype(np.float64, copy=False) for k, v in grads.items()}
    return grads, d_cond


def eval_field(params: FieldParams, cond, x, d, level: str = "fine"):
    """Evaluate at points ``x`` (..., 3) with directions ``d`` (..., 3) and a single cond vector."""
    cond = np.asarray(cond, dtype=np.float64).reshape(-1)
    if cond.shape[0] != params.cond_dim:
        raise ValueError(f"conditioning has dimension {cond.shape[0]}, network expects {params.cond_dim}")
    x = np.asarray(x, dtype=np.float64)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), x.shape)
    lead = x.shape[:-1]
    xs = x.reshape(-1, 1, 3)
    ds = d.reshape(-1, 3)
    enc = params.enc
    pe_x = positional_encode(xs, enc.L_x, enc.include_input)
    pe_d = positional_encode(ds, enc.L_d, enc.include_input)
    conds = np.broadcast_to(cond, (xs.shape[0], cond.shape[0]))
    rgb, sigma, _ = net_forward(params.network(level), pe_x, conds, pe_d)
    return rgb.reshape(*lead, 3), sigma.reshape(lead)


def eval_dynerf(params: FieldParams, z, x, d, level: str = "fine"):
    if params.cond != "latent":
        raise ValueError("eval_dynerf needs a latent-conditioned field")
    return eval_field(params, z, x, d, level)


def eval_nerf_t(params: FieldParams, x, d, t: float, level: str = "fine"):
    if params.cond != "time":
        raise ValueError("eval_nerf_t needs a time-conditioned field")
    return eval_field(params, time_condition(params, t), x, d, level)


def field_fn(params: FieldParams, cond, dtype=np.float64):
    """Wrap the network with a fixed conditioning vector as a renderer field."""
    cond = np.asarray(cond, dtype=np.float64).reshape(-1)
    if cond.shape[0] != params.cond_dim:
        raise ValueError(f"conditioning has dimension {cond.shape[0]}, network expects {params.cond_dim}")
    enc = params.enc

    def fn(pts, dirs, level):
        pe_x = positional_encode(pts, enc.L_x, enc.include_input, dtype)
        pe_d = positional_encode(dirs, enc.L_d, enc.include_input)
        conds = np.broadcast_to(cond, (pts.shape[0], cond.shape[0]))
        rgb, sigma, _ = net_forward(params.network(level), pe_x, conds, pe_d)
        return rgb.astype(np.float64, copy=False), sigma.astype(np.float64, copy=False)

    return fn


def field_at_time(params: FieldParams, table: LatentTable | None, t: float, dtype=np.float64):
    return field_fn(params, condition_at_time(params, table, t), dtype)


# ------------------------------------------------------------------ gradients

@dataclass
class RayBatch:
    origins: np.ndarray   # (R, 3)
    dirs: np.ndarray      # (R, 3) unit
    near: np.ndarray      # (R,)
    far: np.ndarray       # (R,)
    times: np.ndarray     # (R,) frame time per ray
    targets: np.ndarray   # (R, 3)
    depths_coarse: np.ndarray | None = None
    depths_fine: np.ndarray | None = None  # full sorted fine-pass depths, if fixed

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class GradientSet:
    loss: float
    coarse: dict
    fine: dict
    latents: np.ndarray | None  # (T, D), zero rows for frames not in the batch
    outputs: dict = field(default_factory=dict, repr=False)

    def network(self, level):
        return self.coarse if level == "coarse" else self.fine


def _batch_conditions(params, table, times):
    if params.cond == "time":
        return time_condition(params, times), None
    lo, hi, lam = latent_blend(table.T, times)
    cond = (1.0 - lam)[:, None] * table.codes[lo] + lam[:, None] * table.codes[hi]
    return cond, (lo, hi, lam)


def gradients(params: FieldParams, table: LatentTable | None, batch: RayBatch,
              cfg: RenderConfig = RenderConfig(), rng=None, dtype=np.float64) -> GradientSet:
    """Loss (sum of coarse and fine squared errors) and its exact gradients.

    Sample depths are constants of the objective: fine depths drawn from the
    coarse weights carry no gradient. Pass ``depths_coarse``/``depths_fine`` in
    the batch to pin them. ``dtype=np.float32`` runs the network in single
    precision; compositing and the returned gradients stay float64.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("gradients needs a nonempty batch")
    enc = params.enc
    cond, blend = _batch_conditions(params, table, np.asarray(batch.times, dtype=np.float64))
    pe_d = positional_encode(batch.dirs, enc.L_d, enc.include_input)
    det = cfg.deterministic or rng is None
    far = np.asarray(batch.far, dtype=np.float64)

    d_coarse = batch.depths_coarse
    if d_coarse is None:
        d_coarse = stratified_samples(batch.near, batch.far, cfg.n_coarse, rng, det, n_rays=n)

    def level_forward(level, depths):
        pts = batch.origins[:, None, :] + batch.dirs[:, None, :] * depths[..., None]
        pe_x = positional_encode(pts, enc.L_x, enc.include_input, dtype)
        rgb, sigma, cache = net_forward(params.network(level), pe_x, cond, pe_d, keep=True)
        rgb = rgb.astype(np.float64, copy=False)
        sigma = sigma.astype(np.float64, copy=False)
        color, w, trans, delta = composite_batch(rgb, sigma, depths, far)
        return rgb, sigma, cache, color, w, trans, delta

    fc = level_forward("coarse", d_coarse)
    d_fine = batch.depths_fine
    if d_fine is None:
        extra = pdf_resample(fc[4], d_coarse, far, cfg.n_fine, rng, det)
        d_fine = np.sort(np.concatenate([d_coarse, extra], axis=1), axis=1)
    ff = level_forward("fine", d_fine)

    target = np.asarray(batch.targets, dtype=np.float64)
    res_c = fc[3] - target
    res_f = ff[3] - target
    loss = float(np.sum(res_c ** 2) + np.sum(res_f ** 2))

    out_grads = {}
    d_cond = np.zeros_like(cond)
    for level, fwd, res in (("coarse", fc, res_c), ("fine", ff, res_f)):
        rgb, sigma, cache, _, w, trans, delta = fwd
        g_rgb, g_sigma = composite_backward(2.0 * res, rgb, sigma, w, trans, delta)
        g, dc = net_backward(params.network(level), cache, g_rgb, g_sigma)
        out_grads[level] = g
        d_cond += dc

    lat = None
    if params.cond == "latent":
        lo, hi, lam = blend
        lat = np.zeros_like(table.codes)
        np.add.at(lat, lo, (1.0 - lam)[:, None] * d_cond)
        np.add.at(lat, hi, lam[:, None] * d_cond)
    outputs = {"color_coarse": fc[3], "color_fine": ff[3], "depths_coarse": d_coarse, "depths_fine": d_fine}
    return GradientSet(loss, out_grads["coarse"], out_grads["fine"], lat, outputs)
