"""Upsampling depth decoder, depth-map container, normalization and colorization."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError

COLORMAPS = ("viridis", "gray")
COLORMAP_MIDPOINT = 128


@dataclass
class DepthMap:
    values: np.ndarray  # H x W meters
    valid_mask: np.ndarray  # H x W bool
    range: tuple  # (min_depth, max_depth)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.ndim != 2 or self.valid_mask.shape != self.values.shape:
            raise ValidationError(
                f"depth values {self.values.shape} and mask {self.valid_mask.shape} must be matching 2-D arrays"
            )
        lo, hi = self.range
        if not (0 < lo < hi):
            raise ValidationError(f"invalid depth range {self.range}")
        self.range = (float(lo), float(hi))
        v = self.values[self.valid_mask]
        if v.size and (v.min() < lo or v.max() > hi):
            raise ValidationError("valid depth values fall outside the depth range")

    @property
    def shape(self):
        return self.values.shape


def _check_range(rng) -> tuple:
    lo, hi = float(rng[0]), float(rng[1])
    if not (0 < lo < hi):
        raise ValidationError(f"depth range needs 0 < min < max, got {rng}")
    return lo, hi


def denormalize_depth(norm, rng) -> DepthMap:
    lo, hi = _check_range(rng)
    n = np.asarray(norm, dtype=np.float64)
    if n.size and (n.min() < 0 or n.max() > 1):
        raise ValidationError("normalized depth must lie in [0, 1]")
    values = np.clip(lo + n * (hi - lo), lo, hi)
    return DepthMap(values, np.ones(n.shape, dtype=bool), (lo, hi))


def normalize_depth(values, rng):
    lo, hi = _check_range(rng)
    return (values - lo) / (hi - lo)


def denormalize_tensor(norm: torch.Tensor, rng) -> torch.Tensor:
    lo, hi = _check_range(rng)
    return lo + norm * (hi - lo)


class DepthHead(nn.Module):
    """Conv-deconv decoder over a feature pyramid plus a two-conv regressor.

    Starting at the coarsest pyramid level, each stride-2 deconvolution brings
    the running map to the next finer level, where that level's features are
    added through a 1x1 projection. ``extra_upsamples`` further deconvolutions
    bring the latent resolution to image resolution. The regressor ends in a
    sigmoid, giving depth normalized to [0, 1].
    """

    def __init__(self, level_channels: list, width: int = 32, extra_upsamples: int = 2):
        super().__init__()
        if len(level_channels) < 2:
            raise ValidationError("depth head needs at least two pyramid levels")
        self.level_channels = list(level_channels)  # finest first
        self.inp = nn.Conv2d(level_channels[-1], width, 3, padding=1)
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in level_channels[:-1])
        n_up = len(level_channels) - 1 + extra_upsamples
        self.deconvs = nn.ModuleList(nn.ConvTranspose2d(width, width, 4, stride=2, padding=1) for _ in range(n_up))
        self.refine = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in range(n_up))
        self.reg1 = nn.Conv2d(width, width // 2, 3, padding=1)
        self.reg2 = nn.Conv2d(width // 2, 1, 3, padding=1)

    def forward(self, levels: list) -> torch.Tensor:
        if len(levels) != len(self.level_channels):
            raise ValidationError(f"expected {len(self.level_channels)} pyramid levels, got {len(levels)}")
        for lvl, c in zip(levels, self.level_channels):
            if lvl.shape[1] != c:
                raise ValidationError(f"pyramid level has {lvl.shape[1]} channels, head expects {c}")
        x = F.silu(self.inp(levels[-1]))
        laterals = list(reversed(list(zip(levels[:-1], self.lateral))))
        for i, (deconv, refine) in enumerate(zip(self.deconvs, self.refine)):
            x = deconv(x)
            if i < len(laterals):
                lvl, lat = laterals[i]
                if lvl.shape[-2:] != x.shape[-2:]:
                    raise ValidationError(f"pyramid level size {tuple(lvl.shape[-2:])} != {tuple(x.shape[-2:])}")
                x = x + lat(lvl)
            x = F.silu(refine(F.silu(x)))
        x = F.silu(self.reg1(x))
        return torch.sigmoid(self.reg2(x))[:, 0]


def decode_depth(features, head: DepthHead) -> torch.Tensor:
    levels = features.levels if hasattr(features, "levels") else features
    return head(levels)


@lru_cache(maxsize=None)
def colormap_table(name: str = "viridis") -> np.ndarray:
    """256 x 3 uint8 lookup table. Entry 0 is used for the nearest depth."""
    if name == "gray":
        ramp = np.arange(256, dtype=np.uint8)
        return np.stack([ramp, ramp, ramp], axis=1)
    if name != "viridis":
        raise ValidationError(f"unknown colormap {name!r}; choose from {COLORMAPS}")
    text = resources.files("semdepth").joinpath("data/viridis.txt").read_text()
    rows = [list(map(int, ln.split())) for ln in text.splitlines() if ln and not ln.startswith("#")]
    table = np.array(rows, dtype=np.uint8)
    assert table.shape == (256, 3)
    table.setflags(write=False)
    return table


def colormap_indices(depth: DepthMap) -> np.ndarray:
    mask = depth.valid_mask
    if not mask.any():
        raise ValidationError("cannot colorize a depth map with no valid pixels")
    v = depth.values
    lo, hi = v[mask].min(), v[mask].max()
    if hi == lo:
        idx = np.full(v.shape, COLORMAP_MIDPOINT, dtype=np.int64)
    else:
        idx = np.floor((v - lo) / (hi - lo) * 255.0 + 0.5).astype(np.int64)
        idx = np.clip(idx, 0, 255)
    return np.where(mask, idx, -1)


def colorize(depth: DepthMap, colormap: str = "viridis") -> np.ndarray:
    table = colormap_table(colormap)
    idx = colormap_indices(depth)
    out = table[np.maximum(idx, 0)].astype(np.float64) / 255.0
    out[idx < 0] = 0.0
    return out
