"""2x image enhancement backends and the class-probability comparison report.

All resizing uses half-pixel-center alignment: output pixel ``i`` samples the
source at ``(i + 0.5) / scale - 0.5``, clamped to the valid range.
"""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import AdapterError, ValidationError
from .imageio import check_image, read_rgb_png, write_rgb_png

log = logging.getLogger(__name__)

ENHANCE_FACTOR = 2
VARIANTS = ("original", "resized", "super_resolved")
TOP_K = 5


def _axis_weights(n_in: int, n_out: int, scale: float):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(img, scale: float) -> np.ndarray:
    if not scale > 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    out_h, out_w = int(round(h * scale)), int(round(w * scale))
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"resize of {h}x{w} by {scale} gives a degenerate {out_h}x{out_w} image")
    return resize_to(arr, out_h, out_w, scale)


def resize_to(arr: np.ndarray, out_h: int, out_w: int, scale: float | None = None) -> np.ndarray:
    """Half-pixel bilinear resize to an explicit size.

    Interpolation is written as ``a + w * (b - a)`` so that equal neighbours
    reproduce their value bit-exactly.
    """
    h, w = arr.shape[:2]
    sy = out_h / h if scale is None else scale
    sx = out_w / w if scale is None else scale
    y0, y1, wy = _axis_weights(h, out_h, sy)
    x0, x1, wx = _axis_weights(w, out_w, sx)
    extra = (1,) * (arr.ndim - 2)
    wy = wy.reshape((-1, 1) + extra)
    wx = wx.reshape((1, -1) + extra)
    top = arr[y0][:, x0] + wx * (arr[y0][:, x1] - arr[y0][:, x0])
    bot = arr[y1][:, x0] + wx * (arr[y1][:, x1] - arr[y1][:, x0])
    return top + wy * (bot - top)


class Enhancer(Protocol):
    name: str

    def upscale(self, img: np.ndarray) -> np.ndarray: ...


class Bilinear2x:
    """Baseline enhancer: plain bilinear upscaling."""

    name = "bilinear2x"

    def upscale(self, img):
        return bilinear_resize(img, ENHANCE_FACTOR)


class Nearest2x:
    """Pixel replication. Adds no information, so it acts as the identity enhancer."""

    name = "nearest2x"

    def upscale(self, img):
        return np.repeat(np.repeat(np.asarray(img, dtype=np.float64), 2, axis=0), 2, axis=1)


class SuperResolutionNet(nn.Module):
    """Bilinear 2x upsampling followed by a small residual CNN."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        up = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return up + self.body(up)


class ToySuperResolver:
    """Learned stand-in for a pretrained super-resolution model."""

    name = "toy_sr"

    def __init__(self, net: SuperResolutionNet):
        self.net = net.eval()

    @torch.no_grad()
    def upscale(self, img):
        x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32).transpose(2, 0, 1))[None]
        y = self.net(x)[0].permute(1, 2, 0).numpy().astype(np.float64)
        return y


class ExternalEnhancer:
    """Directory-exchange adapter around an external super-resolver.

    ``command`` is an argv list; the tokens ``{input}`` and ``{output}`` are
    replaced by the PNG paths. The tool must write a 2H x 2W RGB PNG.
    """

    name = "external"

    def __init__(self, command: Sequence[str], timeout: float = 300.0):
        if not command:
            raise ValidationError("external enhancer needs a command")
        self.command = list(command)
        self.timeout = timeout

    def upscale(self, img):
        with tempfile.TemporaryDirectory(prefix="enhance-") as tmp:
            src, dst = Path(tmp) / "input.png", Path(tmp) / "output.png"
            write_rgb_png(src, img)
            argv = [a.replace("{input}", str(src)).replace("{output}", str(dst)) for a in self.command]
            try:
                subprocess.run(argv, check=True, capture_output=True, timeout=self.timeout)
            except (OSError, subprocess.SubprocessError) as exc:
                raise AdapterError(f"external enhancer failed: {exc}") from exc
            if not dst.exists():
                raise AdapterError("external enhancer wrote no output image")
            return read_rgb_png(dst)


@dataclass
class ClampCounter:
    """Counts enhancer outputs that needed clamping back into [0, 1]."""

    events: int = 0


clamp_counter = ClampCounter()


def enhance(img, enhancer: Enhancer) -> np.ndarray:
    img = check_image(img)
    out = np.asarray(enhancer.upscale(img), dtype=np.float64)
    h, w = img.shape[:2]
    if out.shape != (ENHANCE_FACTOR * h, ENHANCE_FACTOR * w, 3):
        raise AdapterError(
            f"enhancer {enhancer.name!r} returned shape {out.shape}, expected {(2 * h, 2 * w, 3)}"
        )
    if out.min() < 0 or out.max() > 1:
        clamp_counter.events += 1
        log.warning("enhancer %s produced values outside [0, 1]; clamping", enhancer.name)
        out = np.clip(out, 0.0, 1.0)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class VariantReport:
    """Class probabilities for the original, bilinear-resized and enhanced image."""

    probabilities: dict  # variant -> np.ndarray of shape (num_classes,)
    class_names: list
    flip_events: list = field(default_factory=list)

    def prob(self, variant: str, cls) -> float:
        idx = self.class_names.index(cls) if isinstance(cls, str) else int(cls)
        return float(self.probabilities[variant][idx])

    def deltas(self, a: str, b: str) -> np.ndarray:
        return self.probabilities[b] - self.probabilities[a]

    def to_json(self) -> dict:
        out = {
            v: {name: float(p) for name, p in zip(self.class_names, self.probabilities[v])} for v in VARIANTS
        }
        out["flip_events"] = self.flip_events
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False)


def flip_events(probs: dict, class_names: list) -> list:
    """Argmax changes and top-k membership/rank changes for every variant pair."""
    events = []
    pairs = [("original", "resized"), ("original", "super_resolved"), ("resized", "super_resolved")]
    for a, b in pairs:
        pa, pb = probs[a], probs[b]
        # stable sort so exact ties rank identically for identical inputs
        ra = list(np.argsort(-pa, kind="stable")[:TOP_K])
        rb = list(np.argsort(-pb, kind="stable")[:TOP_K])
        pair = f"{a}/{b}"
        if ra[0] != rb[0]:
            events.append({"pair": pair, "kind": "argmax", "from": class_names[ra[0]], "to": class_names[rb[0]]})
        for c in sorted(set(ra) | set(rb)):
            rank_a = ra.index(c) if c in ra else None
            rank_b = rb.index(c) if c in rb else None
            if rank_a != rank_b:
                events.append(
                    {"pair": pair, "kind": "top5", "class": class_names[c], "rank_from": rank_a, "rank_to": rank_b}
                )
    return events


def class_probability_report(img, segmenter, enhancer: Enhancer) -> VariantReport:
    from .embedding import extract_semantic_context

    img = check_image(img)
    images = {
        "original": img,
        "resized": bilinear_resize(img, ENHANCE_FACTOR),
        "super_resolved": enhance(img, enhancer),
    }
    probs = {}
    names = None
    for variant, im in images.items():
        ctx = extract_semantic_context(im, segmenter)
        probs[variant] = softmax(ctx.logits)
        names = ctx.class_names
    return VariantReport(probs, list(names), flip_events(probs, list(names)))


def dominant_class_statistic(reports: list, dominant: list) -> dict:
    """Fraction of images whose enhanced variant is at least as confident in
    the dominant class as the bilinear variant."""
    wins = [r.prob("super_resolved", d) >= r.prob("resized", d) for r, d in zip(reports, dominant)]
    gains = [r.prob("super_resolved", d) - r.prob("resized", d) for r, d in zip(reports, dominant)]
    return {
        "images": len(wins),
        "enhanced_at_least_bilinear": int(sum(wins)),
        "fraction": float(np.mean(wins)) if wins else 0.0,
        "mean_gain": float(np.mean(gains)) if gains else 0.0,
    }
