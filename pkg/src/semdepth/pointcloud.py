"""Pinhole back-projection of depth + RGB to a colored point cloud, and PLY export.

Camera frame: +X right, +Y down, +Z forward. Pixel ``(u, v)`` is column ``u``,
row ``v``; its ray passes through ``((u - cx) / fx, (v - cy) / fy, 1)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        extra = set(d) - {"fx", "fy", "cx", "cy"}
        if extra:
            raise ValidationError(f"unknown intrinsics keys: {sorted(extra)}")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))

    @classmethod
    def centered(cls, width: int, height: int, focal: float | None = None) -> "CameraIntrinsics":
        f = float(focal if focal is not None else width)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


@dataclass
class PointCloud:
    points: np.ndarray  # N x 3, meters
    colors: np.ndarray  # N x 3 in [0, 1]
    pixels: np.ndarray | None = None  # N x 2 (u, v) source pixels

    def __len__(self):
        return len(self.points)


def backproject(depth, rgb, K: CameraIntrinsics) -> PointCloud:
    values = np.asarray(depth.values, dtype=np.float64)
    mask = np.asarray(depth.valid_mask, dtype=bool)
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[:2] != values.shape:
        raise ValidationError(f"depth {values.shape} and image {rgb.shape[:2]} dimensions differ")
    v, u = np.nonzero(mask)
    d = values[v, u]
    if np.any(d <= 0):
        raise ValidationError("non-positive depth inside the valid mask")
    x = (u - K.cx) * d / K.fx
    y = (v - K.cy) * d / K.fy
    points = np.stack([x, y, d], axis=1)
    return PointCloud(points, rgb[v, u], np.stack([u, v], axis=1))


def reproject(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points to (u, v) pixel coordinates."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([K.fx * p[:, 0] / p[:, 2] + K.cx, K.fy * p[:, 1] / p[:, 2] + K.cy], axis=1)


def _fmt32(f: np.float32) -> str:
    """Shortest decimal text that parses back to the same float32."""
    return np.format_float_positional(f, unique=True, trim="-")


def write_ply(pc: PointCloud, path) -> None:
    n = len(pc)
    if n == 0:
        raise ValidationError("refusing to write an empty point cloud")
    pts = np.asarray(pc.points, dtype=np.float32)
    cols = np.clip(np.round(np.asarray(pc.colors, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    lines = [
        f"{_fmt32(x)} {_fmt32(y)} {_fmt32(z)} {r} {g} {b}\n" for (x, y, z), (r, g, b) in zip(pts, cols)
    ]
    Path(path).write_text(header + "".join(lines))
