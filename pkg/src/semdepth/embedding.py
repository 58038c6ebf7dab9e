"""Semantic conditioning path: segmenter logits -> text embedding -> tokens.

A segmenter backend turns an image into a 150-way class-logit vector (spatial
average of its per-pixel logits). A GELU MLP maps that vector to a 100-dim
embedding, and a linear projection reshapes the embedding into the token
sequence the U-Net cross-attends to.
"""

from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .enhancement import resize_to
from .errors import AdapterError, ValidationError
from .imageio import check_image, write_rgb_png

NUM_CLASSES = 150
EMBED_DIM = 100

# ADE20K-150 label order.
ADE20K_CLASSES = [
    "wall", "building", "sky", "floor", "tree", "ceiling", "road", "bed", "windowpane", "grass",
    "cabinet", "sidewalk", "person", "earth", "door", "table", "mountain", "plant", "curtain", "chair",
    "car", "water", "painting", "sofa", "shelf", "house", "sea", "mirror", "rug", "field",
    "armchair", "seat", "fence", "desk", "rock", "wardrobe", "lamp", "bathtub", "railing", "cushion",
    "base", "box", "column", "signboard", "chest of drawers", "counter", "sand", "sink", "skyscraper", "fireplace",
    "refrigerator", "grandstand", "path", "stairs", "runway", "case", "pool table", "pillow", "screen door", "stairway",
    "river", "bridge", "bookcase", "blind", "coffee table", "toilet", "flower", "book", "hill", "bench",
    "countertop", "stove", "palm", "kitchen island", "computer", "swivel chair", "boat", "bar", "arcade machine", "hovel",
    "bus", "towel", "light", "truck", "tower", "chandelier", "awning", "streetlight", "booth", "television receiver",
    "airplane", "dirt track", "apparel", "pole", "land", "bannister", "escalator", "ottoman", "bottle", "buffet",
    "poster", "stage", "van", "ship", "fountain", "conveyer belt", "canopy", "washer", "plaything", "swimming pool",
    "stool", "barrel", "basket", "waterfall", "tent", "bag", "minibike", "cradle", "oven", "ball",
    "food", "step", "tank", "trade name", "microwave", "pot", "animal", "bicycle", "lake", "dishwasher",
    "screen", "blanket", "sculpture", "hood", "sconce", "vase", "traffic light", "tray", "ashcan", "fan",
    "pier", "crt screen", "plate", "monitor", "bulletin board", "shower", "radiator", "glass", "clock", "flag",
]
assert len(ADE20K_CLASSES) == NUM_CLASSES


@dataclass(frozen=True)
class SemanticContext:
    logits: np.ndarray
    class_names: Optional[list] = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.shape != (NUM_CLASSES,):
            raise ValidationError(f"semantic context must have {NUM_CLASSES} logits, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValidationError("semantic context contains non-finite logits")
        object.__setattr__(self, "logits", logits)


@dataclass(frozen=True)
class TextEmbedding:
    values: object  # (..., 100) array or tensor


@dataclass(frozen=True)
class ConditioningTokens:
    tokens: object  # (..., num_tokens, token_dim)

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.shape[-2])

    @property
    def token_dim(self) -> int:
        return int(self.tokens.shape[-1])


def gelu(x: float) -> float:
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class ContextMLP(nn.Module):
    """150 -> hidden (GELU) -> 100."""

    def __init__(self, hidden: int = 256, in_dim: int = NUM_CLASSES, out_dim: int = EMBED_DIM):
        super().__init__()
        if in_dim != NUM_CLASSES or out_dim != EMBED_DIM:
            raise ValidationError(f"context MLP must map {NUM_CLASSES} -> {EMBED_DIM}, got {in_dim} -> {out_dim}")
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, ctx):
        return self.fc2(nn.functional.gelu(self.fc1(ctx)))


class TokenProjector(nn.Module):
    """Linear 100 -> num_tokens * token_dim, reshaped to a token sequence.

    Stands in for the tokenizer stage: continuous embeddings cannot go through
    a discrete text tokenizer, so the stage is a learned projection.
    """

    def __init__(self, num_tokens: int, token_dim: int, in_dim: int = EMBED_DIM):
        super().__init__()
        if num_tokens < 1 or token_dim < 1:
            raise ValidationError("num_tokens and token_dim must be positive")
        if in_dim != EMBED_DIM:
            raise ValidationError(f"token projector consumes {EMBED_DIM}-dim embeddings, got {in_dim}")
        self.num_tokens = num_tokens
        self.token_dim = token_dim
        self.proj = nn.Linear(in_dim, num_tokens * token_dim)

    def forward(self, emb):
        out = self.proj(emb)
        return out.reshape(*emb.shape[:-1], self.num_tokens, self.token_dim)


def _as_tensor(x, like: nn.Module):
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=p.dtype)


def context_to_embedding(ctx, mlp: ContextMLP) -> TextEmbedding:
    """Accepts a SemanticContext or a raw (..., 150) array/tensor."""
    logits = ctx.logits if isinstance(ctx, SemanticContext) else ctx
    x = logits if torch.is_tensor(logits) else _as_tensor(logits, mlp)
    if x.shape[-1] != NUM_CLASSES:
        raise ValidationError(f"expected {NUM_CLASSES}-dim context, got {tuple(x.shape)}")
    return TextEmbedding(mlp(x))


def embed_to_tokens(emb, proj: TokenProjector, num_tokens: int | None = None, token_dim: int | None = None):
    values = emb.values if isinstance(emb, TextEmbedding) else emb
    x = values if torch.is_tensor(values) else _as_tensor(values, proj)
    if x.shape[-1] != EMBED_DIM:
        raise ValidationError(f"expected {EMBED_DIM}-dim embedding, got {tuple(x.shape)}")
    if (num_tokens is not None and num_tokens != proj.num_tokens) or (
        token_dim is not None and token_dim != proj.token_dim
    ):
        raise ValidationError(
            f"projector emits {proj.num_tokens}x{proj.token_dim} tokens, requested {num_tokens}x{token_dim}"
        )
    return ConditioningTokens(proj(x))


# -- segmenter backends ------------------------------------------------------


class ToySegmenterNet(nn.Module):
    """Three conv blocks and a 1x1 classifier emitting per-pixel class logits."""

    def __init__(self, width: int = 16, num_classes: int = NUM_CLASSES):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.classifier = nn.Conv2d(2 * w, num_classes, 1)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, x):
        return self.classifier(self.features(x))

    def pooled(self, x):
        return self.forward(x).mean(dim=(-2, -1))


class ToySegmenter:
    """In-process segmenter backend operating at a fixed working resolution.

    Inputs of any size are bilinearly resampled to ``input_size`` first, as
    pretrained segmenters do with their own preprocessing.
    """

    name = "toy"

    def __init__(self, net: ToySegmenterNet, input_size: int = 64, class_names=ADE20K_CLASSES):
        self.net = net.eval()
        self.input_size = input_size
        self.class_names = list(class_names)

    def prepare(self, img: np.ndarray) -> np.ndarray:
        if img.shape[:2] != (self.input_size, self.input_size):
            img = resize_to(img, self.input_size, self.input_size)
        return img

    @torch.no_grad()
    def logits(self, img: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(self.prepare(img).transpose(2, 0, 1), dtype=np.float32))
        return self.net.pooled(x[None])[0].double().numpy()

    @torch.no_grad()
    def logits_batch(self, imgs: np.ndarray) -> np.ndarray:
        x = np.stack([self.prepare(im).transpose(2, 0, 1) for im in imgs]).astype(np.float32)
        return self.net.pooled(torch.from_numpy(x)).double().numpy()


class ExternalSegmenter:
    """Directory-exchange adapter.

    The image is written as ``input.png``; the tool must write a plain-text
    file with one logit per line (line ``i`` is class ``i``). ``{input}`` and
    ``{output}`` in ``command`` are replaced by the two paths.
    """

    name = "external"

    def __init__(self, command: Sequence[str], class_names=ADE20K_CLASSES, timeout: float = 300.0):
        if not command:
            raise ValidationError("external segmenter needs a command")
        self.command = list(command)
        self.class_names = list(class_names)
        self.timeout = timeout

    def logits(self, img: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="segment-") as tmp:
            src, dst = Path(tmp) / "input.png", Path(tmp) / "logits.txt"
            write_rgb_png(src, img)
            argv = [a.replace("{input}", str(src)).replace("{output}", str(dst)) for a in self.command]
            try:
                subprocess.run(argv, check=True, capture_output=True, timeout=self.timeout)
            except (OSError, subprocess.SubprocessError) as exc:
                raise AdapterError(f"external segmenter failed: {exc}") from exc
            if not dst.exists():
                raise AdapterError("external segmenter wrote no logits file")
            lines = [ln.strip() for ln in dst.read_text().splitlines() if ln.strip()]
        if len(lines) != NUM_CLASSES:
            raise AdapterError(f"external segmenter returned {len(lines)} logits, expected {NUM_CLASSES}")
        return np.array([float(v) for v in lines])


def extract_semantic_context(image, segmenter) -> SemanticContext:
    img = check_image(image)
    logits = np.asarray(segmenter.logits(img), dtype=np.float64)
    if logits.shape != (NUM_CLASSES,):
        raise AdapterError(f"segmenter {segmenter.name!r} returned {logits.shape} logits, expected ({NUM_CLASSES},)")
    return SemanticContext(logits, list(segmenter.class_names))
