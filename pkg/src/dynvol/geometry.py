"""Pinhole cameras, per-pixel rays and the evaluation spiral.

Camera frame convention: +x right, +y down, +z forward. Pixel centers sit at
``index + 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_from_camera: np.ndarray = field(repr=False)
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        m = np.array(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        m.setflags(write=False)
        object.__setattr__(self, "world_from_camera", m)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
            raise ValueError("world_from_camera rotation is not orthonormal")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("world_from_camera last row must be [0, 0, 0, 1]")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.world_from_camera[:3, 2]

    def to_dict(self, cam_id=None) -> dict:
        d = {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "world_from_camera": [float(v) for v in self.world_from_camera.ravel()],
            "near": self.near,
            "far": self.far,
        }
        if cam_id is not None:
            d = {"id": cam_id, **d}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        required = ("width", "height", "fx", "fy", "cx", "cy", "world_from_camera", "near", "far")
        for key in required:
            if key not in d:
                raise ValueError(f"camera entry missing field '{key}'")
        m = d["world_from_camera"]
        if len(m) != 16:
            raise ValueError(f"camera field 'world_from_camera' needs 16 numbers, got {len(m)}")
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            world_from_camera=np.asarray(m, dtype=np.float64).reshape(4, 4),
            near=float(d["near"]),
            far=float(d["far"]),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    source: tuple = (None, None, None, None)  # (view, row, col, t)

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"ray needs near < far, got {self.near}, {self.far}")


def look_at(position, target, down, intrinsics: CameraModel) -> CameraModel:
    """Camera at ``position`` whose +z axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    x = np.cross(down, f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, f, position
    return CameraModel(
        width=intrinsics.width, height=intrinsics.height,
        fx=intrinsics.fx, fy=intrinsics.fy, cx=intrinsics.cx, cy=intrinsics.cy,
        world_from_camera=m, near=intrinsics.near, far=intrinsics.far,
    )


def pixel_directions(camera: CameraModel, rows, cols) -> np.ndarray:
    """Unit world-space directions for arrays of pixel indices."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    cam = np.stack(
        [(cols + 0.5 - camera.cx) / camera.fx,
         (rows + 0.5 - camera.cy) / camera.fy,
         np.ones_like(rows)],
        axis=-1,
    )
    d = cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def camera_rays(camera: CameraModel):
    """Origins and directions for every pixel, each shaped (H, W, 3)."""
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    dirs = pixel_directions(camera, rows, cols)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def generate_ray(camera: CameraModel, row: int, col: int, t: int = 0, view=None) -> Ray:
    if not 0 <= row < camera.height:
        raise IndexError(f"row {row} out of range [0, {camera.height})")
    if not 0 <= col < camera.width:
        raise IndexError(f"col {col} out of range [0, {camera.width})")
    d = pixel_directions(camera, row, col)
    return Ray(
        origin=camera.position.copy(),
        direction=d,
        near=camera.near,
        far=camera.far,
        source=(view, row, col, t),
    )


def spiral_trajectory(cameras: list[CameraModel], n: int) -> list[CameraModel]:
    """``n`` look-at poses on one revolution of a spiral around the rig.

    Per-axis radii are the largest that keep every pose inside the bounding box
    of the input camera positions. All poses look at the mean of the cameras'
    optical-axis targets (a point halfway between near and far).
    """
    if len(cameras) < 2:
        raise ValueError("spiral_trajectory needs at least two cameras")
    if n <= 0:
        return []
    pos = np.stack([c.position for c in cameras])
    center = pos.mean(axis=0)
    radii = np.minimum(center - pos.min(axis=0), pos.max(axis=0) - center)
    radii = np.maximum(radii, 0.0)
    targets = np.stack([c.position + 0.5 * (c.near + c.far) * c.forward for c in cameras])
    target = targets.mean(axis=0)
    down = np.stack([c.rotation[:, 1] for c in cameras]).mean(axis=0)
    first = cameras[0]
    out = []
    for k in range(n):
        theta = 2.0 * np.pi * k / n
        offset = radii * np.array([np.cos(theta), np.sin(theta), np.cos(0.5 * theta)])
        p = np.clip(center + offset, pos.min(axis=0), pos.max(axis=0))
        out.append(look_at(p, target, down, first))
    return out
