"""RGB + depth samples: on-disk loading and a synthetic corpus with analytic depth.

On-disk layout::

    <root>/rgb/<id>.png       8-bit RGB
    <root>/depth/<id>.png     16-bit depth, value = meters * depth_png_scale, 0 = invalid
    <root>/profile.json       optional DatasetProfile fields
    <root>/labels.json        optional {id: dominant class name}

Synthetic scenes are ray-cast through exact pinhole intrinsics: a back wall,
optionally a floor and a ceiling, and up to three spheres. Shading uses world-
anchored textures, a directional light and exponential fog, so the image
carries monocular depth cues.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .depth_head import DepthMap
from .embedding import ADE20K_CLASSES
from .enhancement import bilinear_resize
from .errors import ValidationError
from .imageio import read_depth_png_raw, read_rgb_png, write_depth_png, write_rgb_png
from .pointcloud import CameraIntrinsics


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    depth_range: tuple
    depth_png_scale: float
    width: int
    height: int
    intrinsics: Optional[CameraIntrinsics] = None

    def __post_init__(self):
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise ValidationError(f"profile {self.name}: invalid depth range {self.depth_range}")
        if not self.depth_png_scale > 0:
            raise ValidationError(f"profile {self.name}: depth_png_scale must be positive")
        object.__setattr__(self, "depth_range", (float(lo), float(hi)))

    def camera(self, width: int | None = None, height: int | None = None) -> CameraIntrinsics:
        if self.intrinsics is not None:
            return self.intrinsics
        return CameraIntrinsics.centered(width or self.width, height or self.height)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "depth_range": list(self.depth_range),
            "depth_png_scale": self.depth_png_scale,
            "width": self.width,
            "height": self.height,
        }
        if self.intrinsics is not None:
            d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetProfile":
        allowed = {"name", "depth_range", "depth_png_scale", "width", "height", "intrinsics"}
        extra = set(d) - allowed
        if extra:
            raise ValidationError(f"unknown profile keys: {sorted(extra)}")
        intr = d.get("intrinsics")
        return cls(
            d["name"], tuple(d["depth_range"]), float(d["depth_png_scale"]), int(d["width"]), int(d["height"]),
            CameraIntrinsics.from_dict(intr) if intr else None,
        )


PROFILES = {
    "nyu": DatasetProfile("nyu", (0.1, 10.0), 1000.0, 640, 480),
    "kitti": DatasetProfile("kitti", (0.1, 80.0), 256.0, 1240, 375),
    "synthetic": DatasetProfile("synthetic", (0.1, 10.0), 1000.0, 64, 64),
}


def get_profile(name_or_profile) -> DatasetProfile:
    if isinstance(name_or_profile, DatasetProfile):
        return name_or_profile
    try:
        return PROFILES[name_or_profile]
    except KeyError:
        raise ValidationError(f"unknown dataset profile {name_or_profile!r}; choose from {sorted(PROFILES)}")


@dataclass
class Sample:
    image: np.ndarray
    depth: DepthMap
    intrinsics: CameraIntrinsics
    id: str
    labels: Optional[np.ndarray] = None  # per-pixel class index
    dominant_class: Optional[str] = None

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape:
            raise ValidationError(f"sample {self.id}: image {self.image.shape[:2]} vs depth {self.depth.shape}")


def load_sample(rgb_path, depth_path, profile, sample_id: str | None = None) -> Sample:
    profile = get_profile(profile)
    image = read_rgb_png(rgb_path)
    raw = read_depth_png_raw(depth_path)
    if raw.shape != image.shape[:2]:
        raise ValidationError(f"{rgb_path}: image {image.shape[:2]} and depth {raw.shape} sizes differ")
    meters = raw / profile.depth_png_scale
    lo, hi = profile.depth_range
    valid = (raw > 0) & (meters >= lo) & (meters <= hi)
    h, w = raw.shape
    return Sample(
        image, DepthMap(meters, valid, profile.depth_range), profile.camera(w, h),
        sample_id or Path(rgb_path).stem,
    )


def load_dataset_dir(root, profile=None) -> list:
    root = Path(root)
    if not (root / "rgb").is_dir():
        raise ValidationError(f"{root}: missing rgb/ directory")
    if profile is None:
        pj = root / "profile.json"
        profile = DatasetProfile.from_dict(json.loads(pj.read_text())) if pj.exists() else PROFILES["nyu"]
    profile = get_profile(profile)
    labels = {}
    if (root / "labels.json").exists():
        labels = json.loads((root / "labels.json").read_text())
    samples = []
    for rgb in sorted((root / "rgb").glob("*.png")):
        s = load_sample(rgb, root / "depth" / rgb.name, profile, rgb.stem)
        s.dominant_class = labels.get(rgb.stem)
        samples.append(s)
    return samples


def write_dataset_dir(root, samples, profile) -> None:
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    profile = get_profile(profile)
    labels = {}
    for s in samples:
        write_rgb_png(root / "rgb" / f"{s.id}.png", s.image)
        write_depth_png(root / "depth" / f"{s.id}.png", s.depth.values, profile.depth_png_scale, s.depth.valid_mask)
        if s.dominant_class is not None:
            labels[s.id] = s.dominant_class
    (root / "profile.json").write_text(json.dumps(profile.to_dict(), indent=2) + "\n")
    if labels:
        (root / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n")


# -- synthetic scenes --------------------------------------------------------

SCENE_CLASSES = ("wall", "floor", "ceiling", "ball")
FOG_COLOR = np.array([0.62, 0.66, 0.72])
FOG_DENSITY = 0.2
LIGHT_DIR = np.array([0.3, 1.0, 0.5]) / np.linalg.norm([0.3, 1.0, 0.5])  # direction light travels


@dataclass
class Plane:
    """Points X with normal . X = offset (offset > 0, camera on the negative side)."""

    normal: np.ndarray
    offset: float
    cls: str
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))
    texture: str = "none"  # none | stripes | checker
    period: float = 0.5

    def intersect(self, rays: np.ndarray) -> np.ndarray:
        denom = rays @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(denom > 1e-12, self.offset / denom, np.inf)
        return z

    def normals(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(-self.normal, points.shape)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    cls: str = "ball"
    color: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.2, 0.2]))
    texture: str = "none"
    period: float = 0.5

    def intersect(self, rays: np.ndarray) -> np.ndarray:
        # |z r - c|^2 = R^2 with rays r = (x, y, 1); nearest root in Z
        a = np.einsum("ij,ij->i", rays, rays)
        b = rays @ self.center
        c = self.center @ self.center - self.radius**2
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            z = (b - np.sqrt(disc)) / a
        return np.where((disc >= 0) & (z > 0), z, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) / self.radius


def pixel_rays(K: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """(H*W) x 3 rays with unit Z component, row-major over (v, u)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([((u - K.cx) / K.fx).ravel(), ((v - K.cy) / K.fy).ravel(), np.ones(u.size)], axis=1)


def _texture(prim, points: np.ndarray) -> np.ndarray:
    p = prim.period
    if prim.texture == "stripes":
        t = np.floor(points[:, 0] / p) % 2
    elif prim.texture == "checker":
        t = (np.floor(points[:, 0] / p) + np.floor(points[:, 2] / p)) % 2
    else:
        return np.ones(len(points))
    return 0.8 + 0.3 * t


def render_scene(primitives, K: CameraIntrinsics, width: int, height: int):
    """Ray-cast primitives; returns (image, depth, labels, hit_index)."""
    rays = pixel_rays(K, width, height)
    zs = np.stack([p.intersect(rays) for p in primitives])
    hit = np.argmin(zs, axis=0)
    depth = zs[hit, np.arange(rays.shape[0])]
    if not np.all(np.isfinite(depth)):
        raise ValidationError("scene does not cover every pixel")
    points = rays * depth[:, None]
    rgb = np.zeros_like(points)
    labels = np.zeros(len(points), dtype=np.int64)
    for i, prim in enumerate(primitives):
        sel = hit == i
        if not sel.any():
            continue
        pts = points[sel]
        n = prim.normals(pts)
        shade = 0.35 + 0.65 * np.clip(n @ -LIGHT_DIR, 0.0, 1.0)
        rgb[sel] = prim.color[None, :] * (shade * _texture(prim, pts))[:, None]
        labels[sel] = ADE20K_CLASSES.index(prim.cls)
    transmit = np.exp(-FOG_DENSITY * depth)[:, None]
    rgb = np.clip(rgb * transmit + FOG_COLOR[None, :] * (1.0 - transmit), 0.0, 1.0)
    return (
        rgb.reshape(height, width, 3),
        depth.reshape(height, width),
        labels.reshape(height, width),
        hit.reshape(height, width),
    )


def _rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


SCENE_KINDS = ("wall", "floor", "ball")
MAX_SCENE_DEPTH = 9.5


def sample_primitives(rng: np.random.Generator) -> list:
    """Draw a 2-5 primitive scene: wall, optional floor/ceiling, 0-3 spheres.

    A scene kind is drawn first so that wall-, floor- and sphere-dominated
    images all occur; the camera pitch tilts the planes accordingly.
    """
    kind = SCENE_KINDS[int(rng.integers(0, len(SCENE_KINDS)))]
    pitch = rng.uniform(0.35, 0.6) if kind == "floor" else rng.uniform(0.0, 0.2)
    # world -> camera rotation for a camera pitched down by `pitch` and yawed
    R = _rotation_x(pitch) @ _rotation_y(rng.uniform(-0.3, 0.3))
    prims = []
    wall_color = np.array([0.78, 0.74, 0.66]) * rng.uniform(0.85, 1.1)
    wall_dist = rng.uniform(3.0, 5.5) if kind == "wall" else rng.uniform(4.5, 7.0)
    prims.append(Plane(R @ np.array([0.0, 0.0, 1.0]), wall_dist, "wall", wall_color, "stripes", rng.uniform(0.3, 0.7)))
    cam_h = rng.uniform(1.0, 1.8)
    if kind == "floor" or rng.random() < 0.5:
        floor_color = np.array([0.55, 0.38, 0.22]) * rng.uniform(0.85, 1.15)
        prims.append(Plane(R @ np.array([0.0, 1.0, 0.0]), cam_h, "floor", floor_color, "checker", rng.uniform(0.4, 0.8)))
    if kind == "wall" and rng.random() < 0.3:
        prims.append(Plane(R @ np.array([0.0, -1.0, 0.0]), rng.uniform(1.2, 2.0), "ceiling", np.array([0.93, 0.93, 0.9])))
    n_spheres = int(rng.integers(0, 3))
    if kind == "ball" or len(prims) == 1:
        n_spheres = max(n_spheres, 1)
    n_spheres = min(n_spheres, 5 - len(prims))
    for k in range(n_spheres):
        if kind == "ball" and k == 0:
            r = rng.uniform(0.6, 0.9)
            z = rng.uniform(r + 1.0, 2.8)
            x, y = rng.uniform(-0.1, 0.1) * z, rng.uniform(-0.1, 0.1) * z
        else:
            r = rng.uniform(0.3, 0.8)
            z = rng.uniform(max(1.6, r + 0.9), 5.0)
            x, y = rng.uniform(-0.35, 0.35) * z, rng.uniform(-0.25, 0.3) * z
        phase = np.pi * rng.uniform(0, 1) + np.array([0.0, np.pi / 3, 2 * np.pi / 3])
        color = 0.25 + 0.7 * np.abs(np.cos(phase))
        prims.append(Sphere(np.array([x, y, z]), r, "ball", color))
    return prims


def scene_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def generate_synthetic_scene(seed, width: int = 64, height: int = 64, profile="synthetic", sample_id: str | None = None) -> Sample:
    if width < 16 or height < 16:
        raise ValidationError(f"synthetic scenes need width, height >= 16, got {width}x{height}")
    profile = get_profile(profile)
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics.centered(width, height)
    lo, hi = profile.depth_range
    while True:
        prims = sample_primitives(rng)
        image, depth, labels, _ = render_scene(prims, K, width, height)
        if depth.min() >= lo and depth.max() <= min(hi, MAX_SCENE_DEPTH):
            break
    image = np.round(image * 255.0) / 255.0  # exactly representable as 8-bit PNG
    counts = np.bincount(labels.ravel(), minlength=len(ADE20K_CLASSES))
    if sample_id is None:
        sample_id = f"seed{seed if isinstance(seed, (int, np.integer)) else 'x'}"
    return Sample(
        image, DepthMap(depth, np.ones(depth.shape, dtype=bool), profile.depth_range), K,
        sample_id, labels, ADE20K_CLASSES[int(np.argmax(counts))],
    )


@dataclass
class Splits:
    train: list
    val: list
    test: list

    def __getitem__(self, name):
        return getattr(self, name)

    @property
    def all(self):
        return self.train + self.val + self.test


def split_ids(ids, seed: int) -> dict:
    """80/10/10 split ordered by a seed-salted SHA-256 of each id."""
    def key(i):
        return hashlib.sha256(f"{seed}/{i}".encode()).hexdigest()

    order = sorted(ids, key=key)
    n = len(order)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}


def corpus(profile="synthetic", count: int = 200, seed: int = 0, width: int | None = None, height: int | None = None) -> Splits:
    if count < 10:
        raise ValidationError(f"corpus needs at least 10 scenes, got {count}")
    profile = get_profile(profile)
    width = width or profile.width
    height = height or profile.height
    samples = {}
    for i in range(count):
        sid = f"s{seed}-{i:05d}"
        samples[sid] = generate_synthetic_scene(scene_seed(seed, i), width, height, profile, sid)
    parts = split_ids(list(samples), seed)
    # keep generation order inside each split
    index = {sid: i for i, sid in enumerate(samples)}
    return Splits(*[[samples[s] for s in sorted(parts[k], key=index.get)] for k in ("train", "val", "test")])


def split_samples(samples: list, seed: int) -> Splits:
    parts = split_ids([s.id for s in samples], seed)
    by_id = {s.id: s for s in samples}
    index = {s.id: i for i, s in enumerate(samples)}
    return Splits(*[[by_id[s] for s in sorted(parts[k], key=index.get)] for k in ("train", "val", "test")])


def downscale_sample(s: Sample) -> Sample:
    """Half-resolution copy: bilinear image, every other depth pixel.

    Intrinsics follow the half-pixel convention (c' = (c + 0.5) / 2 - 0.5).
    """
    K = s.intrinsics
    image = np.round(bilinear_resize(s.image, 0.5) * 255.0) / 255.0
    h, w = image.shape[:2]
    depth = DepthMap(s.depth.values[: 2 * h : 2, : 2 * w : 2], s.depth.valid_mask[: 2 * h : 2, : 2 * w : 2], s.depth.range)
    K2 = CameraIntrinsics(K.fx / 2, K.fy / 2, (K.cx + 0.5) / 2 - 0.5, (K.cy + 0.5) / 2 - 0.5)
    labels = s.labels[: 2 * h : 2, : 2 * w : 2] if s.labels is not None else None
    return Sample(image, depth, K2, s.id, labels, s.dominant_class)
