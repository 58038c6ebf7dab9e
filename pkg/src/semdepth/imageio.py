"""PNG helpers: 8-bit RGB images and 16-bit single-channel depth."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def check_image(img) -> np.ndarray:
    """Validate an H x W x 3 float image in [0, 1] and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValidationError("image values must be finite and within [0, 1]")
    return arr


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_rgb_png(path, img) -> None:
    Image.fromarray(quantize8(check_image(img)), mode="RGB").save(Path(path))


def read_rgb_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_depth_png(path, meters: np.ndarray, scale: float, valid_mask=None) -> None:
    """Store depth as round(meters * scale) in a 16-bit PNG; 0 marks invalid."""
    raw = np.round(np.asarray(meters, dtype=np.float64) * scale)
    if valid_mask is not None:
        raw = np.where(valid_mask, raw, 0)
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(Path(path))


def read_depth_png_raw(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise ValidationError(f"{path}: depth PNG must be 16-bit single channel, got mode {im.mode}")
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: depth PNG must be single channel")
    return arr.astype(np.int64)
