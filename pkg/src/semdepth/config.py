"""Run configuration: nested dataclasses loaded from strict JSON.

Unknown keys anywhere are errors. ``seed`` is the only required key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

ENHANCERS = ("bilinear2x", "nearest2x", "toy_sr", "external")
SEGMENTERS = ("toy", "external")


@dataclass
class DataConfig:
    profile: str = "synthetic"
    root: Optional[str] = None  # None: generate the synthetic corpus in memory
    count: int = 200
    width: int = 64
    height: int = 64


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    num_steps: int = 50
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass
class ModelConfig:
    latent_channels: int = 4
    downsample: int = 4
    ae_width: int = 32
    unet_levels: int = 2
    base_width: int = 32
    num_tokens: int = 4
    token_dim: int = 32
    attention_heads: int = 4
    mlp_hidden: int = 256
    head_width: int = 32
    segmenter_width: int = 16
    segmenter_input: int = 64
    sr_width: int = 32


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 1e-3
    ae_steps: int = 800
    ae_learning_rate: float = 2e-3
    segmenter_steps: int = 1500
    sr_steps: int = 300
    aux_batch_size: int = 16


@dataclass
class InferConfig:
    t_infer: int = 1
    num_steps: int = 1  # > 1: deterministic reverse steps from t_infer before the final feature pass


@dataclass
class BackendConfig:
    enhancer: str = "toy_sr"
    enhancer_command: Optional[list] = None
    segmenter: str = "toy"
    segmenter_command: Optional[list] = None


@dataclass
class LossConfig:
    ldm_weight: float = 0.0
    silog_variance: float = 0.85


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    backends: BackendConfig = field(default_factory=BackendConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    intrinsics: Optional[dict] = None

    def validate(self) -> "RunConfig":
        if self.backends.enhancer not in ENHANCERS:
            raise ConfigError(f"unknown enhancer {self.backends.enhancer!r}; choose from {ENHANCERS}")
        if self.backends.segmenter not in SEGMENTERS:
            raise ConfigError(f"unknown segmenter {self.backends.segmenter!r}; choose from {SEGMENTERS}")
        if self.backends.enhancer == "external" and not self.backends.enhancer_command:
            raise ConfigError("external enhancer requires backends.enhancer_command")
        if self.backends.segmenter == "external" and not self.backends.segmenter_command:
            raise ConfigError("external segmenter requires backends.segmenter_command")
        if not 1 <= self.infer.t_infer <= self.schedule.num_steps:
            raise ConfigError(f"infer.t_infer must be within [1, {self.schedule.num_steps}]")
        if not 1 <= self.infer.num_steps <= self.infer.t_infer:
            raise ConfigError("infer.num_steps must be within [1, t_infer]")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.loss.ldm_weight < 0:
            raise ConfigError("loss.ldm_weight must be non-negative")
        m = self.model
        f = m.downsample * 2 ** (m.unet_levels - 1)
        if self.data.width % f or self.data.height % f:
            raise ConfigError(f"image size must be divisible by {f} for this model configuration")
        if self.data.root is None and self.data.profile != "synthetic":
            raise ConfigError("data.root is required unless data.profile is 'synthetic'")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "schedule"): ScheduleConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "infer"): InferConfig,
    (RunConfig, "backends"): BackendConfig,
    (RunConfig, "loss"): LossConfig,
}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict) or "seed" not in raw:
        raise ConfigError("config: 'seed' is required")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("config: 'seed' must be an integer")
    return _build(RunConfig, raw, "config").validate()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)
