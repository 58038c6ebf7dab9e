"""End-to-end depth pipeline: training, evaluation, inference and the
enhancement comparison.

The predictive distribution factors into four stages, each owned by one
parameter group:

    lambda1  semantic conditioning  image -> (enhance) -> segmenter logits -> MLP -> tokens
    lambda2  encode and noise       image -> latent z0 -> z_t            (frozen after pretraining)
    lambda3  denoiser features      (z_t, t, tokens) -> U-Net feature pyramid
    lambda4  depth decoding         pyramid -> normalized depth -> meters
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import dataset as ds
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict
from .denoiser import Autoencoder, UNet
from .depth_head import DepthHead, DepthMap, colorize, denormalize_depth, denormalize_tensor
from .diffusion_core import NoiseSchedule, ldm_loss, make_noise_schedule, q_sample, reverse_step
from .embedding import (
    ADE20K_CLASSES, ContextMLP, ExternalSegmenter, TokenProjector, ToySegmenter, ToySegmenterNet,
)
from .enhancement import (
    Bilinear2x, ExternalEnhancer, Nearest2x, SuperResolutionNet, ToySuperResolver,
    bilinear_resize, class_probability_report, dominant_class_statistic, enhance,
)
from .errors import DivergenceError, StageError, ValidationError
from .imageio import check_image, read_rgb_png, write_depth_png, write_rgb_png
from .metrics import MetricAccumulator, MetricReport, masked_pairs
from .pointcloud import CameraIntrinsics, backproject, write_ply

log = logging.getLogger(__name__)

STAGES = (
    ("semantic_conditioning", "lambda1"),
    ("encode_and_noise", "lambda2"),
    ("denoise_features", "lambda3"),
    ("depth_decode", "lambda4"),
)
DEPTH_PNG_SCALE = 1000.0  # exported depth PNGs are millimeters
FORMAT_TAG = "semdepth-pipeline"


class DepthModel(nn.Module):
    """All learnable parameters, grouped by pipeline stage."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        m = cfg.model
        self.ae = Autoencoder(m.latent_channels, m.downsample, m.ae_width)
        self.context_mlp = ContextMLP(m.mlp_hidden)
        self.token_proj = TokenProjector(m.num_tokens, m.token_dim)
        self.unet = UNet(
            m.latent_channels, m.base_width, m.unet_levels, m.token_dim, m.num_tokens,
            cfg.schedule.num_steps, m.attention_heads,
        )
        self.head = DepthHead(self.unet.feature_channels, m.head_width, int(round(math.log2(m.downsample))))
        self.segmenter = ToySegmenterNet(m.segmenter_width) if cfg.backends.segmenter == "toy" else None
        self.sr = SuperResolutionNet(m.sr_width) if cfg.backends.enhancer == "toy_sr" else None

    def groups(self) -> dict:
        return {
            "lambda1": [self.context_mlp, self.token_proj],
            "lambda2": [self.ae],
            "lambda3": [self.unet],
            "lambda4": [self.head],
        }

    def trainable_parameters(self) -> list:
        return [p for mods in (self.groups()["lambda1"], [self.unet], [self.head]) for mod in mods for p in mod.parameters()]


@dataclass
class Pipeline:
    config: RunConfig
    model: DepthModel
    schedule: NoiseSchedule
    profile: ds.DatasetProfile
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: RunConfig, profile: ds.DatasetProfile | None = None) -> "Pipeline":
        torch.manual_seed(cfg.seed)
        model = DepthModel(cfg)
        s = cfg.schedule
        schedule = make_noise_schedule(s.num_steps, s.kind, s.beta_start, s.beta_end)
        return cls(cfg, model, schedule, profile or ds.get_profile(cfg.data.profile))

    # -- backends ------------------------------------------------------------

    @property
    def segmenter(self):
        b = self.config.backends
        if b.segmenter == "toy":
            return ToySegmenter(self.model.segmenter, self.config.model.segmenter_input)
        return ExternalSegmenter(b.segmenter_command)

    @property
    def enhancer(self):
        b = self.config.backends
        if b.enhancer == "toy_sr":
            return ToySuperResolver(self.model.sr)
        if b.enhancer == "bilinear2x":
            return Bilinear2x()
        if b.enhancer == "nearest2x":
            return Nearest2x()
        return ExternalEnhancer(b.enhancer_command)

    @property
    def depth_range(self):
        return self.profile.depth_range

    def camera(self, width: int, height: int) -> CameraIntrinsics:
        if self.config.intrinsics:
            return CameraIntrinsics.from_dict(self.config.intrinsics)
        return self.profile.camera(width, height)

    # -- stages --------------------------------------------------------------

    def semantic_logits(self, img: np.ndarray, use_enhancement: bool = True) -> np.ndarray:
        src = enhance(img, self.enhancer) if use_enhancement else img
        return np.asarray(self.segmenter.logits(src), dtype=np.float64)

    def tokens(self, logits: torch.Tensor) -> torch.Tensor:
        return self.model.token_proj(self.model.context_mlp(logits))

    def features(self, z0: torch.Tensor, tokens: torch.Tensor, noise: torch.Tensor, trace=None):
        cfg = self.config.infer
        t = cfg.t_infer
        z = q_sample(z0, self.schedule.alpha_bar(t), noise)
        if trace is not None:
            trace.append(_trace("encode_and_noise", z))
        ts = _reverse_timesteps(t, cfg.num_steps)
        for cur, nxt in zip(ts, ts[1:]):
            eps, _ = self.model.unet(z, cur, tokens)
            z = _jump(z, eps, cur, nxt, self.schedule)
        return self.model.unet(z, ts[-1], tokens)

    def predict(self, img, use_enhancement: bool = True, seed: int = 0, trace=None) -> DepthMap:
        img = check_image(img)
        m = self.model
        stage = "semantic_conditioning"
        try:
            with torch.no_grad():
                logits = torch.from_numpy(self.semantic_logits(img, use_enhancement)).float()[None]
                tokens = self.tokens(logits)
                if trace is not None:
                    trace.append(_trace(stage, tokens))
                stage = "encode_and_noise"
                x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))[None]
                z0 = m.ae.encode(x)
                gen = torch.Generator().manual_seed(int(seed))
                noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
                stage = "denoise_features"
                _, pyr = self.features(z0, tokens, noise, trace)
                if trace is not None:
                    trace.append(_trace(stage, *pyr.levels))
                stage = "depth_decode"
                norm = m.head(pyr.levels)[0].double().numpy()
                depth = denormalize_depth(norm, self.depth_range)
                if trace is not None:
                    trace.append(_trace(stage, depth.values))
        except (ValidationError, RuntimeError) as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(stage, exc) from exc
        return depth

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        arrays = {}
        for name, tensor in self.model.state_dict().items():
            arrays[name] = tensor.detach().cpu().numpy()
        meta = dict(self.meta)
        meta.update({"format": FORMAT_TAG, "profile": self.profile.to_dict(), "torch": torch.__version__})
        save_checkpoint(path, arrays, self.config.to_dict(), meta)

    @classmethod
    def load(cls, path) -> "Pipeline":
        arrays, cfg_dict, meta = load_checkpoint(path)
        if meta.get("format") != FORMAT_TAG:
            raise ValidationError(f"{path}: not a pipeline checkpoint")
        cfg = config_from_dict(cfg_dict)
        pipe = cls.build(cfg, ds.DatasetProfile.from_dict(meta["profile"]))
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        try:
            pipe.model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ValidationError(f"{path}: checkpoint does not match its config: {exc}") from exc
        pipe.meta = meta
        pipe.model.eval()
        return pipe


def _trace(stage: str, *tensors) -> dict:
    factor = dict(STAGES)[stage]
    return {"stage": stage, "factor": factor, "shapes": [list(t.shape) for t in tensors]}


def _reverse_timesteps(t: int, n: int) -> list:
    ts = sorted({int(round(v)) for v in np.linspace(t, 1, n)}, reverse=True)
    return ts if ts[0] == t else [t] + ts


def _jump(z, eps, t: int, s: int, schedule: NoiseSchedule):
    """Deterministic move from timestep t to an earlier timestep s >= 1."""
    if s == t - 1:
        return reverse_step(z, eps, t, schedule)
    ab_t, ab_s = schedule.alpha_bar(t), schedule.alpha_bar(s)
    z0 = (z - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_s) * z0 + math.sqrt(1 - ab_s) * eps


# -- training ----------------------------------------------------------------


def silog_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, variance_weight: float = 0.85):
    """Scale-invariant log loss, computed per image and averaged over the batch."""
    g = torch.where(mask, torch.log(pred) - torch.log(gt.clamp_min(1e-6)), torch.zeros_like(pred))
    n = mask.flatten(1).sum(1).clamp_min(1)
    mean = g.flatten(1).sum(1) / n
    mean_sq = (g * g).flatten(1).sum(1) / n
    return torch.sqrt((mean_sq - variance_weight * mean * mean).clamp_min(1e-12)).mean()


def _to_nchw(images) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32))


def load_training_samples(cfg: RunConfig):
    d = cfg.data
    if d.root is None:
        splits = ds.corpus(d.profile, d.count, cfg.seed, d.width, d.height)
        return splits, ds.get_profile(d.profile)
    root = Path(d.root)
    pj = root / "profile.json"
    profile = ds.DatasetProfile.from_dict(json.loads(pj.read_text())) if pj.exists() else ds.get_profile(d.profile)
    samples = ds.load_dataset_dir(root, profile)
    if not samples:
        raise ValidationError(f"{root}: no samples found")
    return ds.split_samples(samples, cfg.seed), profile


def pretrain_autoencoder(pipe: Pipeline, train, val, rng: np.random.Generator) -> dict:
    cfg = pipe.config.train
    ae = pipe.model.ae
    x_all = _to_nchw([s.image for s in train])
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.ae_learning_rate)
    losses = []
    for step in range(cfg.ae_steps):
        idx = rng.integers(0, len(x_all), size=min(cfg.aux_batch_size, len(x_all)))
        x = x_all[idx]
        loss = (ae(x) - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    ae.requires_grad_(False).eval()
    return {"steps": cfg.ae_steps, "final_loss": losses[-1] if losses else None,
            "val_l1": reconstruction_error(ae, val) if val else None}


@torch.no_grad()
def reconstruction_error(ae: Autoencoder, samples) -> float:
    x = _to_nchw([s.image for s in samples])
    return float((ae(x) - x).abs().mean())


def _label_targets(samples, stride: int) -> torch.Tensor:
    off = stride // 2
    return torch.from_numpy(np.stack([s.labels[off::stride, off::stride] for s in samples])).long()


def pretrain_segmenter(pipe: Pipeline, train, val, rng: np.random.Generator) -> dict:
    net = pipe.model.segmenter
    seg = ToySegmenter(net, pipe.config.model.segmenter_input)
    cfg = pipe.config.train
    if any(s.labels is None for s in train):
        raise ValidationError("toy segmenter training needs per-pixel labels (synthetic corpus)")
    x_all = torch.from_numpy(np.stack([seg.prepare(s.image).transpose(2, 0, 1) for s in train]).astype(np.float32))
    stride = 4  # two stride-2 convolutions
    if any(s.image.shape[:2] != (seg.input_size, seg.input_size) for s in train):
        raise ValidationError("toy segmenter training expects images at the segmenter input size")
    y_pix = _label_targets(train, stride)
    y_dom = torch.tensor([ADE20K_CLASSES.index(s.dominant_class) for s in train])
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    net.train()
    for step in range(cfg.segmenter_steps):
        idx = torch.from_numpy(rng.integers(0, len(x_all), size=min(cfg.aux_batch_size, len(x_all))))
        logits = net(x_all[idx])
        loss = F.cross_entropy(logits, y_pix[idx]) + F.cross_entropy(logits.mean(dim=(-2, -1)), y_dom[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.requires_grad_(False).eval()
    return {"steps": cfg.segmenter_steps, "train_accuracy": segmenter_accuracy(seg, train),
            "val_accuracy": segmenter_accuracy(seg, val) if val else None}


def segmenter_accuracy(seg: ToySegmenter, samples) -> float:
    logits = seg.logits_batch([s.image for s in samples])
    pred = [ADE20K_CLASSES[i] for i in logits.argmax(axis=1)]
    return float(np.mean([p == s.dominant_class for p, s in zip(pred, samples)]))


def pretrain_super_resolver(pipe: Pipeline, train, rng: np.random.Generator) -> dict:
    net = pipe.model.sr
    cfg = pipe.config.train
    hi = _to_nchw([s.image for s in train])
    lo = _to_nchw([bilinear_resize(s.image, 0.5) for s in train])
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    base = float((F.interpolate(lo, scale_factor=2, mode="bilinear", align_corners=False) - hi).abs().mean())
    loss = None
    for step in range(cfg.sr_steps):
        idx = torch.from_numpy(rng.integers(0, len(hi), size=min(cfg.aux_batch_size, len(hi))))
        loss = (net(lo[idx]) - hi[idx]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.requires_grad_(False).eval()
    with torch.no_grad():
        final = float((net(lo) - hi).abs().mean())
    return {"steps": cfg.sr_steps, "bilinear_l1": base, "l1": final}


def pretrain_backends(pipe: Pipeline, splits, rng: np.random.Generator) -> dict:
    stages = {}
    if pipe.model.segmenter is not None:
        stages["segmenter"] = pretrain_segmenter(pipe, splits.train, splits.val, rng)
    if pipe.model.sr is not None:
        stages["super_resolution"] = pretrain_super_resolver(pipe, splits.train, rng)
    return stages


@dataclass
class DepthBatchSource:
    """Frozen-stage outputs cached per training sample."""

    z0: torch.Tensor
    logits: torch.Tensor
    depth: torch.Tensor
    mask: torch.Tensor


@torch.no_grad()
def cache_training_inputs(pipe: Pipeline, samples) -> DepthBatchSource:
    x = _to_nchw([s.image for s in samples])
    z0 = pipe.model.ae.encode(x)
    logits = torch.from_numpy(np.stack([pipe.semantic_logits(s.image) for s in samples])).float()
    depth = torch.from_numpy(np.stack([s.depth.values for s in samples])).float()
    mask = torch.from_numpy(np.stack([s.depth.valid_mask for s in samples]))
    return DepthBatchSource(z0, logits, depth, mask)


def depth_train_step(pipe: Pipeline, opt, batch: DepthBatchSource, noise: torch.Tensor, t_aux=None, noise_aux=None) -> dict:
    cfg = pipe.config
    m = pipe.model
    tokens = pipe.tokens(batch.logits)
    zt = q_sample(batch.z0, pipe.schedule.alpha_bar(cfg.infer.t_infer), noise)
    eps_hat, pyr = m.unet(zt, cfg.infer.t_infer, tokens)
    pred = denormalize_tensor(m.head(pyr.levels), pipe.depth_range)
    depth_loss = silog_loss(pred, batch.depth, batch.mask, cfg.loss.silog_variance)
    loss = depth_loss
    aux = torch.zeros(())
    if cfg.loss.ldm_weight > 0:
        ab = torch.tensor(pipe.schedule.alpha_bars, dtype=torch.float32)[t_aux - 1][:, None, None, None]
        z_aux = ab.sqrt() * batch.z0 + (1 - ab).sqrt() * noise_aux
        eps_aux, _ = m.unet(z_aux, t_aux, tokens)
        aux = ldm_loss(eps_aux, noise_aux)
        loss = loss + cfg.loss.ldm_weight * aux
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss.item()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {"loss": loss.item(), "silog": depth_loss.item(), "ldm": aux.item()}


def train(cfg: RunConfig, out_dir=None, progress=None) -> tuple:
    """Train all stages; returns (pipeline, training log). Writes
    ``model.ckpt`` and ``train_log.json`` into ``out_dir`` when given."""
    torch.set_num_threads(1)
    splits, profile = load_training_samples(cfg)
    if not splits.train:
        raise ValidationError("training split is empty")
    pipe = Pipeline.build(cfg, profile)
    rng = np.random.default_rng(cfg.seed)
    started = time.perf_counter()
    stages = {"autoencoder": pretrain_autoencoder(pipe, splits.train, splits.val, rng)}
    stages.update(pretrain_backends(pipe, splits, rng))
    src = cache_training_inputs(pipe, splits.train)
    opt = torch.optim.Adam(pipe.model.trainable_parameters(), lr=cfg.train.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.train.steps, 1))
    gen = torch.Generator().manual_seed(cfg.seed)
    steps = []
    n = len(splits.train)
    for step in range(cfg.train.steps):
        idx = torch.from_numpy(rng.integers(0, n, size=min(cfg.train.batch_size, n)))
        batch = DepthBatchSource(src.z0[idx], src.logits[idx], src.depth[idx], src.mask[idx])
        noise = torch.randn(batch.z0.shape, generator=gen)
        t_aux = noise_aux = None
        if cfg.loss.ldm_weight > 0:
            t_aux = torch.randint(1, cfg.schedule.num_steps + 1, (len(idx),), generator=gen)
            noise_aux = torch.randn(batch.z0.shape, generator=gen)
        rec = depth_train_step(pipe, opt, batch, noise, t_aux, noise_aux)
        sched.step()
        steps.append({"step": step, **rec})
        if progress and (step % 100 == 0 or step == cfg.train.steps - 1):
            progress(step, rec)
    pipe.model.eval()
    train_log = {"config": cfg.to_dict(), "stages": stages, "steps": steps,
                 "splits": {k: [s.id for s in splits[k]] for k in ("train", "val", "test")}}
    pipe.meta = {"stages": stages}
    log.info("training finished in %.1fs", time.perf_counter() - started)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pipe.save(out / "model.ckpt")
        (out / "train_log.json").write_text(json.dumps(train_log, indent=1) + "\n")
    return pipe, train_log


# -- evaluation / inference ---------------------------------------------------


def evaluate(pipe: Pipeline | None, samples, profile=None, oracle: bool = False, seed: int = 0):
    """Pixel-pooled metrics over ``samples``; returns (report, per-sample list)."""
    if not samples:
        raise ValidationError("nothing to evaluate: empty dataset")
    profile = ds.get_profile(profile) if profile is not None else pipe.profile
    cap = profile.depth_range
    total = MetricAccumulator()
    per_sample = []
    for s in samples:
        if oracle:
            pred = DepthMap(np.where(s.depth.valid_mask, s.depth.values, cap[0]), s.depth.valid_mask, s.depth.range)
        else:
            if s.image.shape[:2] != (pipe.config.data.height, pipe.config.data.width):
                _check_model_dims(pipe, s.image)
            pred = pipe.predict(s.image, seed=seed)
        a, d = masked_pairs(pred, s.depth, cap)
        acc = MetricAccumulator()
        acc.add(a, d)
        total.add(a, d)
        per_sample.append({"id": s.id, **acc.report().to_json()})
    return total.report(), per_sample


def _check_model_dims(pipe: Pipeline, img) -> None:
    m = pipe.config.model
    f = m.downsample * 2 ** (m.unet_levels - 1)
    h, w = img.shape[:2]
    if h % f or w % f:
        raise ValidationError(f"image size {h}x{w} must be divisible by {f} for this checkpoint")


def infer(pipe: Pipeline, image_path, out_dir, ply: bool = False, use_enhancement: bool = True,
          seed: int = 0, colormap: str = "viridis", trace=None) -> dict:
    img = read_rgb_png(image_path)
    _check_model_dims(pipe, img)
    depth = pipe.predict(img, use_enhancement=use_enhancement, seed=seed, trace=trace)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    paths = {"depth": out / f"{stem}_depth.png", "color": out / f"{stem}_depth_color.png"}
    write_depth_png(paths["depth"], depth.values, DEPTH_PNG_SCALE)
    write_rgb_png(paths["color"], colorize(depth, colormap))
    if ply:
        h, w = depth.shape
        paths["ply"] = out / f"{stem}.ply"
        write_ply(backproject(depth, img, pipe.camera(w, h)), paths["ply"])
    return {k: str(v) for k, v in paths.items()}


# -- enhancement comparison ----------------------------------------------------


def load_images(image_dir) -> tuple:
    """(ids, images, dominant labels or None) from a dataset dir or a flat PNG dir."""
    root = Path(image_dir)
    src = root / "rgb" if (root / "rgb").is_dir() else root
    files = sorted(src.glob("*.png"))
    if not files:
        raise ValidationError(f"{image_dir}: no PNG images found")
    labels = json.loads((root / "labels.json").read_text()) if (root / "labels.json").exists() else {}
    ids = [f.stem for f in files]
    return ids, [read_rgb_png(f) for f in files], [labels.get(i) for i in ids]


def backends_from_config(cfg: RunConfig) -> Pipeline:
    """Pipeline with only the enhancement/segmentation backends pretrained."""
    torch.set_num_threads(1)
    pipe = Pipeline.build(cfg)
    if pipe.model.segmenter is not None or pipe.model.sr is not None:
        splits, _ = load_training_samples(cfg)
        rng = np.random.default_rng(cfg.seed)
        pipe.meta = {"stages": pretrain_backends(pipe, splits, rng)}
    return pipe


def compare_enhancement(image_dir, pipe: Pipeline) -> tuple:
    ids, images, labels = load_images(image_dir)
    seg, enh = pipe.segmenter, pipe.enhancer
    reports = {}
    dominant = []
    for sid, img, lab in zip(ids, images, labels):
        rep = class_probability_report(img, seg, enh)
        reports[sid] = rep
        dominant.append(lab if lab is not None else rep.class_names[int(np.argmax(rep.probabilities["resized"]))])
    summary = {
        "enhancer": enh.name,
        "segmenter": seg.name,
        "dominant_class": dominant_class_statistic(list(reports.values()), dominant),
        "flip_events": int(sum(len(r.flip_events) for r in reports.values())),
        "max_abs_delta_original_super_resolved": float(
            max(np.abs(r.deltas("original", "super_resolved")).max() for r in reports.values())
        ),
        "images": {sid: {"dominant": d, "flip_events": len(r.flip_events),
                         "p_resized": r.prob("resized", d), "p_super_resolved": r.prob("super_resolved", d)}
                   for (sid, r), d in zip(reports.items(), dominant)},
    }
    return reports, summary
