"""Image metrics (MSE, PSNR, SSIM/DSSIM) and held-out view evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .render import RenderConfig, render_image
from .sampling import global_median_maps, isg_weight_map

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = 1.0) -> tuple[float, bool]:
    """(dB, capped); zero error reports the cap."""
    if err <= 0:
        return PSNR_CAP, True
    val = 10.0 * np.log10(peak * peak / err)
    if val >= PSNR_CAP:
        return PSNR_CAP, True
    return float(val), False


def psnr(a, b, peak: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), peak)[0]


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter2(img, g):
    out = correlate1d(img, g, axis=0, mode="reflect")
    return correlate1d(out, g, axis=1, mode="reflect")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    g = _gaussian_window()
    pad = SSIM_WIN // 2
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter2(x, g), _filter2(y, g)
        sxx = _filter2(x * x, g) - mx * mx
        syy = _filter2(y * y, g) - my * my
        sxy = _filter2(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        smap = num / den
        vals.append(smap[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def dssim_from_ssim(s: float) -> float:
    return float(np.clip((1.0 - s) / 2.0, 0.0, 1.0))


def dssim(a, b) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 0.0
    return dssim_from_ssim(ssim(a, b))


def eval_frame_indices(T: int, stride: int | None = None) -> list[int]:
    """All frames for short videos, every 10th from 300 frames on (or a forced stride)."""
    if stride is None:
        stride = 10 if T >= 300 else 1
    return list(range(0, T, stride))


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    dssim: list = field(default_factory=list)
    capped: list = field(default_factory=list)
    masked_psnr: list = field(default_factory=list)
    masked_mse: list = field(default_factory=list)
    mask_fraction: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def mean_dssim(self) -> float:
        return float(np.mean(self.dssim))

    @property
    def mean_masked_mse(self) -> float:
        vals = [v for v in self.masked_mse if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> str:
        return (f"mean psnr={self.mean_psnr:.4f} mse={self.mean_mse:.6g} dssim={self.mean_dssim:.6f} "
                f"masked_mse={self.mean_masked_mse:.6g} frames={len(self.frames)}")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "psnr", "mse", "dssim", "psnr_capped", "masked_psnr", "masked_mse", "mask_fraction"])
            for row in zip(self.frames, self.psnr, self.mse, self.dssim, self.capped,
                           self.masked_psnr, self.masked_mse, self.mask_fraction):
                fr, p, m, d, c, mp, mm, mf = row
                w.writerow([fr, f"{p:.6f}", f"{m:.8g}", f"{d:.8f}", int(c), f"{mp:.6f}", f"{mm:.8g}", f"{mf:.6f}"])
            f.write(f"# {self.summary()}\n")


def dynamic_mask(video, view: int, gamma: float = 2e-2, threshold: float = 0.1, downsample: int = 4):
    """(T, H, W) boolean mask of pixels whose ISG weight exceeds ``threshold``."""
    if video.height % downsample or video.width % downsample:
        downsample = 1
    med = global_median_maps(video, downsample, views=[view]).maps[0]
    w = isg_weight_map(video.frames[view], np.broadcast_to(med, video.frames[view].shape), gamma)
    return w > threshold


def evaluate_sequence(model, video, heldout_view, stride: int | None = None, *, mask_gamma: float = 2e-2,
                      mask_threshold: float = 0.1, downsample: int = 4, dtype=np.float64,
                      threads: int = 1) -> MetricReport:
    """Render the held-out camera at the policy's frames and score against ground truth.

    ``model`` is anything with ``params``, ``latents`` and ``render`` (a
    :class:`~dynvol.train.Model` or a checkpoint). ``heldout_view`` is a view
    index or view id.
    """
    v = heldout_view if isinstance(heldout_view, (int, np.integer)) else video.view_index(heldout_view)
    if not 0 <= v < video.V:
        raise KeyError(f"view {heldout_view} not in dataset")
    cam = video.cameras[v]
    cfg = RenderConfig(model.render.n_coarse, model.render.n_fine, deterministic=True)
    mask = dynamic_mask(video, v, mask_gamma, mask_threshold, downsample)
    report = MetricReport()
    for t in eval_frame_indices(video.T, stride):
        img = render_image(model.params, model.latents, float(t), cam, cfg, dtype=dtype, threads=threads)
        gt = video.frames[v, t]
        err = mse(img, gt)
        p, capped = psnr_from_mse(err)
        report.frames.append(t)
        report.mse.append(err)
        report.psnr.append(p)
        report.capped.append(capped)
        report.dssim.append(dssim(img, gt) if min(gt.shape[:2]) >= SSIM_WIN else float("nan"))
        m = mask[t]
        report.mask_fraction.append(float(m.mean()))
        if m.any():
            merr = float(np.mean((img[m] - gt[m]) ** 2))
            report.masked_mse.append(merr)
            report.masked_psnr.append(psnr_from_mse(merr)[0])
        else:
            report.masked_mse.append(float("nan"))
            report.masked_psnr.append(float("nan"))
    return report
