"""Multi-view video container, on-disk dataset layout and the synthetic scene oracle."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, camera_rays
from .render import composite_batch, stratified_samples


@dataclass(frozen=True)
class MultiViewVideo:
    cameras: list
    frames: np.ndarray  # (V, T, H, W, 3) in [0, 1]
    fps: float = 30.0
    view_ids: list = None
    heldout_view_ids: list = field(default_factory=list)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 5 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be (V, T, H, W, 3), got {frames.shape}")
        v, t, h, w, _ = frames.shape
        if v < 1 or t < 1:
            raise ValueError("need at least one view and one frame")
        if len(self.cameras) != v:
            raise ValueError(f"{len(self.cameras)} cameras for {v} views")
        for cam in self.cameras:
            if (cam.height, cam.width) != (h, w):
                raise ValueError(f"camera size {cam.width}x{cam.height} does not match frames {w}x{h}")
        if frames.min() < 0 or frames.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.view_ids is None:
            object.__setattr__(self, "view_ids", [f"{i:02d}" for i in range(v)])
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def V(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def view_index(self, view_id) -> int:
        vid = str(view_id)
        if vid in self.view_ids:
            return self.view_ids.index(vid)
        raise KeyError(f"view '{view_id}' not in dataset (views: {self.view_ids})")

    @property
    def train_views(self) -> list[int]:
        held = {str(v) for v in self.heldout_view_ids}
        return [i for i, vid in enumerate(self.view_ids) if vid not in held]


# ---------------------------------------------------------------- scene oracle

@dataclass(frozen=True)
class Emitter:
    center: tuple
    radius: float
    density: float
    color: tuple
    # None for static; {"kind": "linear", "velocity": [...]} or
    # {"kind": "circular", "orbit_radius": r, "angular_rate": w, "phase": p, "plane": "xz"}
    trajectory: dict = None

    def center_at(self, t):
        c = np.asarray(self.center, dtype=np.float64)
        tr = self.trajectory
        if tr is None:
            return c
        if tr["kind"] == "linear":
            return c + np.asarray(tr["velocity"], dtype=np.float64) * t
        if tr["kind"] == "circular":
            a, b = _PLANES[tr.get("plane", "xz")]
            ang = tr["angular_rate"] * t + tr.get("phase", 0.0)
            out = c.copy()
            out[a] += tr["orbit_radius"] * np.cos(ang)
            out[b] += tr["orbit_radius"] * np.sin(ang)
            return out
        raise ValueError(f"unknown trajectory kind {tr['kind']!r}")


_PLANES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    static: tuple = ()
    dynamic: tuple = ()
    bounds: tuple = ((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0))

    @property
    def emitters(self):
        return tuple(self.static) + tuple(self.dynamic)

    def validate(self, n_frames: int | None = None):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        for e in self.emitters:
            if e.density < 0:
                raise ValueError(f"scene spec: field 'density' must be >= 0, got {e.density}")
            if e.radius <= 0:
                raise ValueError(f"scene spec: field 'radius' must be > 0, got {e.radius}")
            if np.any(np.asarray(e.color) < 0) or np.any(np.asarray(e.color) > 1):
                raise ValueError(f"scene spec: field 'color' must lie in [0, 1], got {e.color}")
        if n_frames is None:
            return
        for e in self.dynamic:
            if e.trajectory is None:
                raise ValueError("scene spec: dynamic emitter missing field 'trajectory'")
            if e.trajectory["kind"] == "circular":
                a, b = _PLANES[e.trajectory.get("plane", "xz")]
                c = np.asarray(e.center, dtype=np.float64)
                r = e.trajectory["orbit_radius"]
                ext = np.zeros(3)
                ext[[a, b]] = r
                pts = [c - ext, c + ext]
            else:
                pts = [e.center_at(0.0), e.center_at(float(n_frames))]
            for p in pts:
                if np.any(p < lo) or np.any(p > hi):
                    raise ValueError(f"scene spec: trajectory leaves domain bounds at {p}")

    def to_dict(self) -> dict:
        def em(e):
            d = {"center": list(e.center), "radius": e.radius, "density": e.density, "color": list(e.color)}
            if e.trajectory is not None:
                d["trajectory"] = e.trajectory
            return d

        return {
            "static": [em(e) for e in self.static],
            "dynamic": [em(e) for e in self.dynamic],
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        def em(x, dynamic):
            for key in ("center", "radius", "density", "color"):
                if key not in x:
                    raise ValueError(f"scene spec: emitter missing field '{key}'")
            if dynamic and "trajectory" not in x:
                raise ValueError("scene spec: dynamic emitter missing field 'trajectory'")
            try:
                center = tuple(float(v) for v in x["center"])
                color = tuple(float(v) for v in x["color"])
                radius, density = float(x["radius"]), float(x["density"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"scene spec: malformed emitter field ({exc})") from None
            if len(center) != 3:
                raise ValueError("scene spec: field 'center' needs 3 numbers")
            if len(color) != 3:
                raise ValueError("scene spec: field 'color' needs 3 numbers")
            traj = x.get("trajectory")
            if traj is not None and traj.get("kind") not in ("linear", "circular"):
                raise ValueError(f"scene spec: field 'trajectory.kind' must be linear|circular, got {traj.get('kind')!r}")
            return Emitter(center, radius, density, color, traj)

        if not isinstance(d, dict):
            raise ValueError("scene spec: top level must be an object")
        spec = cls(
            static=tuple(em(x, False) for x in d.get("static", [])),
            dynamic=tuple(em(x, True) for x in d.get("dynamic", [])),
            bounds=tuple(tuple(float(v) for v in b) for b in d.get("bounds", cls.bounds)),
        )
        spec.validate()
        return spec


def analytic_radiance(spec: SyntheticSceneSpec, x, t):
    """Ground-truth (color, sigma) at points ``x`` (..., 3) and time ``t``.

    Density adds over every emitter containing the point; color is the
    density-weighted mean of those emitters' colors (black where empty).
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = np.zeros(x.shape[:-1])
    weighted = np.zeros(x.shape)
    for e in spec.emitters:
        c = e.center_at(t)
        inside = np.sum((x - c) ** 2, axis=-1) <= e.radius ** 2
        s = np.where(inside, e.density, 0.0)
        sigma = sigma + s
        weighted = weighted + s[..., None] * np.asarray(e.color, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(sigma[..., None] > 0, weighted / np.where(sigma > 0, sigma, 1.0)[..., None], 0.0)
    return color, sigma


def oracle_field(spec: SyntheticSceneSpec, t: float):
    """The analytic scene wrapped in the renderer's field interface."""
    def field(pts, dirs, level):
        return analytic_radiance(spec, pts, t)
    return field


def render_oracle_image(spec: SyntheticSceneSpec, camera: CameraModel, t: float, samples_per_ray: int):
    origins, dirs = camera_rays(camera)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    depths = stratified_samples(camera.near, camera.far, samples_per_ray, n_rays=o.shape[0])
    pts = o[:, None, :] + d[:, None, :] * depths[..., None]
    rgb, sigma = analytic_radiance(spec, pts, t)
    color, _, _, _ = composite_batch(rgb, sigma, depths, camera.far)
    return np.clip(color, 0.0, 1.0).reshape(camera.height, camera.width, 3)


# ------------------------------------------------------------------ disk layout

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray):
    Image.fromarray(_to_u8(img), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_cameras(path, cameras, view_ids):
    with open(path, "w") as f:
        json.dump([c.to_dict(vid) for c, vid in zip(cameras, view_ids)], f, indent=1)


def load_cameras(path):
    with open(path) as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise ValueError(f"{path}: expected a JSON array of cameras")
    cams, ids = [], []
    for i, e in enumerate(entries):
        cams.append(CameraModel.from_dict(e))
        ids.append(str(e.get("id", f"{i:02d}")))
    return cams, ids


def save_dataset(video: MultiViewVideo, out, scene: SyntheticSceneSpec | None = None):
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_cameras(out / "cameras.json", video.cameras, video.view_ids)
        meta = {
            "fps": video.fps,
            "frame_count": video.T,
            "view_ids": list(video.view_ids),
            "heldout_view_ids": [str(v) for v in video.heldout_view_ids],
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=1))
        if scene is not None:
            (out / "scene_spec.json").write_text(json.dumps(scene.to_dict(), indent=1))
        for v, vid in enumerate(video.view_ids):
            vdir = out / "views" / str(vid)
            vdir.mkdir(parents=True, exist_ok=True)
            for t in range(video.T):
                write_png(vdir / f"frame_{t:05d}.png", video.frames[v, t])
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc


def load_dataset(path) -> MultiViewVideo:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    cam_file = path / "cameras.json"
    if not cam_file.exists():
        raise FileNotFoundError(f"missing camera file {cam_file}")
    cameras, ids = load_cameras(cam_file)
    meta_file = path / "meta.json"
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    view_ids = [str(v) for v in meta.get("view_ids", ids)]
    if view_ids != ids:
        raise ValueError(f"meta.json view_ids {view_ids} disagree with cameras.json ids {ids}")
    stacks = []
    counts = {}
    for vid in view_ids:
        files = sorted((path / "views" / vid).glob("frame_*.png"))
        counts[vid] = len(files)
        imgs = []
        for f in files:
            try:
                imgs.append(read_png(f))
            except Exception as exc:
                raise ValueError(f"cannot decode image {f}: {exc}") from exc
        stacks.append(imgs)
    if len(set(counts.values())) != 1:
        raise ValueError(f"frame count mismatch across views: {counts}")
    n = next(iter(counts.values()))
    if n == 0:
        raise ValueError(f"no frames found under {path / 'views'}")
    if "frame_count" in meta and meta["frame_count"] != n:
        raise ValueError(f"frame count mismatch: meta.json says {meta['frame_count']}, found {n}")
    frames = np.stack([np.stack(s) for s in stacks])
    return MultiViewVideo(
        cameras=cameras,
        frames=frames,
        fps=float(meta.get("fps", 30.0)),
        view_ids=view_ids,
        heldout_view_ids=[str(v) for v in meta.get("heldout_view_ids", [])],
    )


def load_scene_spec(path) -> SyntheticSceneSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"scene spec: not valid JSON ({exc})") from None
    return SyntheticSceneSpec.from_dict(d)


def synthesize_dataset(spec: SyntheticSceneSpec, cameras, n_frames: int, samples_per_ray: int = 256,
                       out=None, *, fps: float = 30.0, view_ids=None, heldout_view_ids=(),
                       threads: int = 1) -> MultiViewVideo:
    """Render the analytic scene from every camera at integer times 0..T-1.

    Ground truth uses deterministic midpoint quadrature; frames are quantized
    to 8 bits so the in-memory video matches what ``load_dataset`` reads back.
    """
    spec.validate(n_frames)
    if n_frames < 1:
        raise ValueError("need at least one frame")
    jobs = [(v, t) for v in range(len(cameras)) for t in range(n_frames)]

    def work(job):
        v, t = job
        return render_oracle_image(spec, cameras[v], float(t), samples_per_ray)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            imgs = list(pool.map(work, jobs))
    else:
        imgs = [work(j) for j in jobs]
    h, w = cameras[0].height, cameras[0].width
    frames = np.stack(imgs).reshape(len(cameras), n_frames, h, w, 3)
    frames = _to_u8(frames).astype(np.float64) / 255.0
    video = MultiViewVideo(cameras=list(cameras), frames=frames, fps=fps, view_ids=view_ids,
                           heldout_view_ids=list(heldout_view_ids))
    if out is not None:
        if os.path.exists(out) and not os.access(out, os.W_OK):
            raise OSError(f"cannot write dataset to {out}: not writable")
        save_dataset(video, out, spec)
    return video


def raw_dataset_bytes(video: MultiViewVideo) -> int:
    """Size of the frames as uncompressed 8-bit RGB."""
    return int(np.prod(video.frames.shape))


def ring_rig(n_views: int, size: int, radius: float = 4.0, height: float = 0.0, fov_deg: float = 40.0,
             near: float = 2.0, far: float = 6.0, arc_deg: float = 60.0, target=(0.0, 0.0, 0.0)):
    """Forward-facing arc of cameras looking at ``target``; handy for toy scenes."""
    from .geometry import look_at

    f = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2)
    base = CameraModel(size, size, f, f, size / 2, size / 2, np.eye(4), near, far)
    cams = []
    angles = np.linspace(-arc_deg / 2, arc_deg / 2, n_views) if n_views > 1 else [0.0]
    for i, a in enumerate(angles):
        th = np.deg2rad(a)
        h = height * (1 if i % 2 else -1) if n_views > 2 else height
        pos = np.array([radius * np.sin(th), h, -radius * np.cos(th)])
        cams.append(look_at(pos, target, np.array([0.0, 1.0, 0.0]), base))
    return cams
