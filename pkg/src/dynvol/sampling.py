"""Temporal-variance ray weights and inverse-transform ray selection.

Two weightings are provided: the robust residual of each frame against the
per-pixel temporal median (``isg``) and the clamped mean absolute difference
between two nearby frames (``ist``). Per training frame the weights of all
views are normalized together into one discrete distribution over rays.
"""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IST_WINDOW = 25

_HEADER = struct.Struct("<4sIIIId")
_VERSION = 1
_STRATEGY_CODES = {"isg": 0, "ist": 1, "median": 2}
_STRATEGY_NAMES = {v: k for k, v in _STRATEGY_CODES.items()}


@dataclass(frozen=True)
class MedianMapSet:
    maps: np.ndarray  # (V, H, W, 3)
    downsample: int = 4


@dataclass(frozen=True)
class WeightMapSet:
    weights: np.ndarray  # (V, T, H, W)
    strategy: str
    param: float


@dataclass(frozen=True)
class FrameSampler:
    t: int
    cdf: np.ndarray
    shape: tuple  # (V, H, W)
    total: float
    uniform_fallback: bool = False

    @property
    def probabilities(self) -> np.ndarray:
        return np.diff(self.cdf, prepend=0.0)


def geman_mcclure(x, gamma: float):
    x2 = np.square(x)
    return x2 / (x2 + gamma * gamma)


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Mean over ``factor x factor`` blocks of the two leading spatial axes (..., H, W, C)."""
    if factor == 1:
        return img
    *lead, h, w, c = img.shape
    return img.reshape(*lead, h // factor, factor, w // factor, factor, c).mean(axis=(-4, -2))


def bilinear_upsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear resize of (..., h, w, C) by an integer factor, half-pixel centers, clamped edges."""
    if factor == 1:
        return img
    h, w = img.shape[-3], img.shape[-2]

    def coords(n):
        src = (np.arange(n * factor) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, src - i0

    r0, r1, fr = coords(h)
    c0, c1, fc = coords(w)
    top = img[..., r0, :, :] * (1 - fr)[:, None, None] + img[..., r1, :, :] * fr[:, None, None]
    return top[..., c0, :] * (1 - fc)[:, None] + top[..., c1, :] * fc[:, None]


def global_median_maps(video, downsample: int = 4, views=None) -> MedianMapSet:
    """Per-pixel temporal median, computed at reduced resolution and upsampled."""
    frames = video.frames if views is None else video.frames[list(views)]
    h, w = frames.shape[2:4]
    if downsample < 1 or h % downsample or w % downsample:
        raise ValueError(f"downsample factor {downsample} must divide the frame size {w}x{h}")
    small = box_downsample(frames, downsample)      # (V, T, h, w, 3)
    med = np.median(small, axis=1)                   # even T averages the middle pair
    return MedianMapSet(bilinear_upsample(med, downsample), downsample)


def isg_weight_map(frame, median, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    frame = np.asarray(frame, dtype=np.float64)
    median = np.asarray(median, dtype=np.float64)
    if frame.shape != median.shape:
        raise ValueError(f"shape mismatch {frame.shape} vs {median.shape}")
    return geman_mcclure(frame - median, gamma).mean(axis=-1)


def ist_weight_map(frame_i, frame_j, alpha: float, clamp: str = "lower") -> np.ndarray:
    """Mean absolute channel difference, clamped from below by ``alpha``.

    ``clamp="upper"`` applies ``min(., alpha)`` instead.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    frame_i = np.asarray(frame_i, dtype=np.float64)
    frame_j = np.asarray(frame_j, dtype=np.float64)
    if frame_i.shape != frame_j.shape:
        raise ValueError(f"shape mismatch {frame_i.shape} vs {frame_j.shape}")
    diff = np.abs(frame_i - frame_j).mean(axis=-1)
    if clamp == "lower":
        return np.maximum(diff, alpha)
    if clamp == "upper":
        return np.minimum(diff, alpha)
    raise ValueError(f"clamp must be 'lower' or 'upper', got {clamp!r}")


def isg_weights(video, medians: MedianMapSet, gamma: float, views=None) -> WeightMapSet:
    frames = video.frames if views is None else video.frames[list(views)]
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    w = geman_mcclure(frames - medians.maps[:, None], gamma).mean(axis=-1)
    return WeightMapSet(w, "isg", gamma)


def pick_ist_partner(t: int, T: int, rng, window: int = IST_WINDOW) -> int | None:
    """Uniform frame within ``window`` of ``t``, excluding ``t``; None for single-frame videos."""
    cand = [j for j in range(max(0, t - window), min(T, t + window + 1)) if j != t]
    if not cand:
        return None
    return int(cand[rng.integers(len(cand))])


def build_frame_sampler(weights, t: int = 0) -> FrameSampler:
    """Normalize (V, H, W) weights of one frame into a CDF over flattened rays."""
    w = np.asarray(weights, dtype=np.float64)
    flat = w.ravel()
    if np.any(flat < 0) or not np.all(np.isfinite(flat)):
        raise ValueError("ray weights must be finite and nonnegative")
    total = float(flat.sum())
    fallback = total <= 0
    if fallback:
        warnings.warn(f"all ray weights are zero for frame {t}; sampling uniformly", RuntimeWarning,
                      stacklevel=2)
        flat = np.ones_like(flat)
    cdf = np.cumsum(flat)
    # dividing by the final partial sum keeps the CDF monotone and ends it at exactly 1
    cdf /= cdf[-1]
    return FrameSampler(t, cdf, w.shape, total, fallback)


def draw_rays(sampler: FrameSampler, n: int, rng) -> np.ndarray:
    """``n`` independent inverse-transform draws, returned as (n, 3) [view, row, col]."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    u = rng.random(n)
    idx = np.searchsorted(sampler.cdf, u, side="right")
    idx = np.minimum(idx, sampler.cdf.size - 1)
    return np.stack(np.unravel_index(idx, sampler.shape), axis=1)


# ------------------------------------------------------------------ map cache

def write_map(path, data: np.ndarray, strategy: str, param: float):
    """Write a DYNW weight map (H, W) or DYNM median map (H, W, 3)."""
    data = np.asarray(data)
    magic = b"DYNM" if strategy == "median" else b"DYNW"
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, _VERSION, _STRATEGY_CODES[strategy], h, w, float(param)))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_map(path):
    """Returns (data, strategy, param)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated map header")
    magic, version, code, h, w, param = _HEADER.unpack_from(raw)
    if magic not in (b"DYNW", b"DYNM"):
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported map version {version}")
    channels = 3 if magic == b"DYNM" else 1
    n = h * w * channels
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    data = data.reshape(h, w, 3) if channels == 3 else data.reshape(h, w)
    return data, _STRATEGY_NAMES[code], param


def video_digest(video) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(video.frames, dtype=np.float64).tobytes())
    for cam in video.cameras:
        h.update(json.dumps(cam.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def cached_isg_weights(video, cache_dir, gamma: float, downsample: int = 4, views=None):
    """ISG maps for ``views`` from ``cache_dir``, recomputed iff the inputs changed.

    Returns (WeightMapSet, MedianMapSet, recomputed flag).
    """
    views = list(range(video.V)) if views is None else list(views)
    cache_dir = Path(cache_dir)
    sub = cache_dir / f"isg_g{gamma:.6g}_d{downsample}"
    manifest = sub / "manifest.json"
    key = {"digest": video_digest(video), "gamma": gamma, "downsample": downsample,
           "views": [video.view_ids[v] for v in views], "T": video.T}
    if manifest.exists() and json.loads(manifest.read_text()) == key:
        try:
            med = np.stack([read_map(sub / f"median_{video.view_ids[v]}.dynm")[0] for v in views])
            w = np.stack([
                np.stack([read_map(sub / video.view_ids[v] / f"frame_{t:05d}.dynw")[0] for t in range(video.T)])
                for v in views
            ])
            return WeightMapSet(w, "isg", gamma), MedianMapSet(med, downsample), False
        except (OSError, ValueError):
            pass
    medians = global_median_maps(video, downsample, views)
    wset = isg_weights(video, medians, gamma, views)
    sub.mkdir(parents=True, exist_ok=True)
    for k, v in enumerate(views):
        vid = video.view_ids[v]
        write_map(sub / f"median_{vid}.dynm", medians.maps[k], "median", downsample)
        (sub / vid).mkdir(exist_ok=True)
        for t in range(video.T):
            write_map(sub / vid / f"frame_{t:05d}.dynw", wset.weights[k, t], "isg", gamma)
    manifest.write_text(json.dumps(key))
    # round through float32 so fresh and cached runs train identically
    w32 = wset.weights.astype(np.float32).astype(np.float64)
    m32 = medians.maps.astype(np.float32).astype(np.float64)
    return WeightMapSet(w32, "isg", gamma), MedianMapSet(m32, downsample), True
