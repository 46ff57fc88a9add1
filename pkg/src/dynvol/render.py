"""Discrete volume rendering: stratified depths, compositing, PDF resampling.

All batched functions take a leading ray axis ``R``; per-ray sample arrays are
shaped ``(R, N)``. The last sample of each ray integrates up to the ray's far
bound, so accumulated opacity never exceeds one.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import CameraModel, Ray, camera_rays

PDF_EPS = 1e-5

# field(points (R, N, 3), dirs (R, 3), level) -> rgb (R, N, 3), sigma (R, N)
FieldFn = Callable[[np.ndarray, np.ndarray, str], tuple]


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 32
    n_fine: int = 64
    deterministic: bool = False

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError(f"n_coarse must be >= 2, got {self.n_coarse}")
        if self.n_fine < 0:
            raise ValueError(f"n_fine must be >= 0, got {self.n_fine}")


@dataclass(frozen=True)
class RenderOutput:
    color_coarse: np.ndarray
    color_fine: np.ndarray
    weights_coarse: np.ndarray
    accumulated_opacity: float
    depths: np.ndarray


def stratified_samples(near, far, n: int, rng=None, deterministic: bool = False, n_rays=None):
    """One depth per equal-width bin between ``near`` and ``far``.

    Scalar bounds return shape ``(n,)``; with ``n_rays`` (or array bounds) the
    result is ``(R, n)``. Without ``rng`` or with ``deterministic`` bin
    midpoints are used.
    """
    near_a = np.asarray(near, dtype=np.float64)
    far_a = np.asarray(far, dtype=np.float64)
    if np.any(near_a >= far_a):
        raise ValueError(f"stratified_samples needs near < far, got {near}, {far}")
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    if n_rays is None and near_a.ndim == 0 and far_a.ndim == 0:
        shape = (n,)
    else:
        if n_rays is None:
            n_rays = np.broadcast(near_a, far_a).shape[0]
        near_a = np.broadcast_to(near_a, (n_rays,))[:, None]
        far_a = np.broadcast_to(far_a, (n_rays,))[:, None]
        shape = (n_rays, n)
    if deterministic or rng is None:
        u = np.full(shape, 0.5)
    else:
        u = rng.random(shape)
    return near_a + (np.arange(n) + u) * ((far_a - near_a) / n)


def _deltas(depths: np.ndarray, far) -> np.ndarray:
    far = np.asarray(far, dtype=np.float64)
    last = far[..., None] - depths[..., -1:] if far.ndim else far - depths[..., -1:]
    return np.concatenate([np.diff(depths, axis=-1), last], axis=-1)


def composite_batch(rgb: np.ndarray, sigma: np.ndarray, depths: np.ndarray, far):
    """Batched compositing. Returns (color (R,3), weights (R,N), transmittance (R,N), deltas)."""
    delta = _deltas(depths, far)
    if np.any(delta < 0):
        raise ValueError("composite needs ascending depths that end before far")
    tau = sigma * delta
    # exclusive cumulative optical depth
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    color = np.einsum("...n,...nc->...c", weights, rgb)
    return color, weights, trans, delta


def composite(colors, sigmas, depths, far=None):
    """Composite one ray's samples front to back.

    ``far`` closes the last interval; if omitted the last sample gets the same
    width as its predecessor.
    """
    colors = np.asarray(colors, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(np.diff(depths) < 0):
        raise ValueError("composite needs ascending depths")
    if np.any(sigmas < 0):
        raise ValueError("densities must be nonnegative")
    if far is None:
        far = depths[-1] + (depths[-1] - depths[-2] if len(depths) > 1 else 0.0)
    color, weights, _, _ = composite_batch(colors, sigmas, depths, far)
    return color, weights, float(weights.sum())


def composite_backward(grad_color, rgb, sigma, weights, trans, delta):
    """Gradients of a scalar loss w.r.t. per-sample rgb and sigma.

    With ``s_i = g . c_i`` the density gradient is
    ``delta_k * (T_{k+1} s_k - sum_{i>k} w_i s_i)``.
    """
    grad_rgb = weights[..., None] * grad_color[..., None, :]
    s = np.einsum("...c,...nc->...n", grad_color, rgb)
    ws = weights * s
    after = np.cumsum(ws[..., ::-1], axis=-1)[..., ::-1] - ws
    trans_next = trans * np.exp(-sigma * delta)
    grad_sigma = delta * (trans_next * s - after)
    return grad_rgb, grad_sigma


def pdf_resample(weights, depths, far, n_fine: int, rng=None, deterministic: bool = False):
    """Inverse-transform depths from the piecewise-constant density over coarse bins.

    Bin ``i`` spans ``[depths[i], depths[i+1])`` (the last one ends at ``far``),
    matching the intervals the coarse weights were composited over. Accepts a
    single ray ``(N,)`` or a batch ``(R, N)``; output is sorted per ray.
    """
    weights = np.asarray(weights, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    single = weights.ndim == 1
    if single:
        weights, depths = weights[None], depths[None]
    n_rays, n_bins = weights.shape
    if n_fine == 0:
        out = np.zeros((n_rays, 0))
        return out[0] if single else out
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    edges = np.concatenate([depths, far[:, None]], axis=1)
    w = np.maximum(weights, 0.0) + PDF_EPS
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if deterministic or rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine))
    else:
        u = np.sort(rng.random((n_rays, n_fine)), axis=1)
    # batched searchsorted via per-row offsets
    offset = 2.0 * np.arange(n_rays)[:, None]
    idx = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right")
    idx = idx.reshape(n_rays, n_fine) - np.arange(n_rays)[:, None] * (n_bins + 1) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    rows = np.arange(n_rays)[:, None]
    lo_c = cdf[rows, idx]
    frac = (u - lo_c) / pdf[rows, idx]
    frac = np.clip(frac, 0.0, 1.0)
    lo_e = edges[rows, idx]
    samples = lo_e + frac * (edges[rows, idx + 1] - lo_e)
    samples = np.sort(samples, axis=1)
    return samples[0] if single else samples


def trace_rays(field: FieldFn, origins, dirs, near, far, cfg: RenderConfig, rng=None):
    """Hierarchical coarse + fine rendering of a ray batch with any field.

    Returns a dict with coarse/fine colors, coarse weights, fine opacity and the
    depth arrays used by each pass.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    det = cfg.deterministic or rng is None
    d_coarse = stratified_samples(near, far, cfg.n_coarse, rng, det, n_rays=n_rays)
    pts = origins[:, None, :] + dirs[:, None, :] * d_coarse[..., None]
    rgb_c, sig_c = field(pts, dirs, "coarse")
    col_c, w_c, _, _ = composite_batch(rgb_c, sig_c, d_coarse, far)
    d_new = pdf_resample(w_c, d_coarse, far, cfg.n_fine, rng, det)
    d_fine = np.sort(np.concatenate([d_coarse, d_new], axis=1), axis=1)
    pts = origins[:, None, :] + dirs[:, None, :] * d_fine[..., None]
    rgb_f, sig_f = field(pts, dirs, "fine")
    col_f, w_f, _, _ = composite_batch(rgb_f, sig_f, d_fine, far)
    return {
        "color_coarse": col_c,
        "color_fine": col_f,
        "weights_coarse": w_c,
        "opacity": w_f.sum(axis=1),
        "depths_coarse": d_coarse,
        "depths_fine": d_fine,
    }


def render_ray(params, z, ray: Ray, cfg: RenderConfig, rng=None) -> RenderOutput:
    from .field import field_fn

    out = trace_rays(field_fn(params, z), ray.origin[None], ray.direction[None],
                     ray.near, ray.far, cfg, rng)
    return RenderOutput(
        color_coarse=out["color_coarse"][0],
        color_fine=out["color_fine"][0],
        weights_coarse=out["weights_coarse"][0],
        accumulated_opacity=float(out["opacity"][0]),
        depths=out["depths_fine"][0],
    )


def _pixel_rng(seed: int, view: int, row: int, col: int, t: float):
    return np.random.default_rng([seed, view, row, col, int(round(t * 1e6))])


def render_field_image(field: FieldFn, camera: CameraModel, cfg: RenderConfig, *,
                       seed: int = 0, view: int = 0, t: float = 0.0,
                       chunk_rows: int = 8, threads: int = 1) -> np.ndarray:
    """Render every pixel of ``camera``; returns an (H, W, 3) fine-color image.

    Chunks are row blocks; jittered sampling draws from per-pixel streams so
    the image does not depend on chunking or thread count.
    """
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    image = np.zeros((h, w, 3))

    def work(r0):
        r1 = min(r0 + chunk_rows, h)
        o = origins[r0:r1].reshape(-1, 3)
        d = dirs[r0:r1].reshape(-1, 3)
        if cfg.deterministic:
            res = trace_rays(field, o, d, camera.near, camera.far, cfg, None)
            image[r0:r1] = res["color_fine"].reshape(r1 - r0, w, 3)
            return
        for k in range(o.shape[0]):
            row, col = r0 + k // w, k % w
            rng = _pixel_rng(seed, view, row, col, t)
            res = trace_rays(field, o[k:k + 1], d[k:k + 1], camera.near, camera.far, cfg, rng)
            image[row, col] = res["color_fine"][0]

    starts = range(0, h, chunk_rows)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for r0 in starts:
            work(r0)
    return image


def render_image(params, table, t: float, camera: CameraModel, cfg: RenderConfig, *,
                 dtype=np.float64, **kw) -> np.ndarray:
    """Render a full image at continuous time ``t`` (latent codes are interpolated)."""
    from .field import field_at_time

    return render_field_image(field_at_time(params, table, t, dtype), camera, cfg, t=t, **kw)
