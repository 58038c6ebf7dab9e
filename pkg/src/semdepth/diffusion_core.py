"""Forward noising, noise schedules and the epsilon-prediction loss.

Everything here is a pure function of its inputs. Noise is always supplied by
the caller, so the same draw can be replayed in tests. The arithmetic is
written so it works on numpy arrays and torch tensors alike (the training
loop calls these on batched tensors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients of the forward process.

    Index ``t - 1`` of each array belongs to timestep ``t`` (timesteps run
    1..T; timestep 0 is the clean latent).
    """

    num_steps: int
    betas: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.num_steps,):
            raise ValidationError(f"expected {self.num_steps} betas, got shape {betas.shape}")
        alphas = 1.0 - betas
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise ValidationError("alphas must lie in (0, 1]")
        for name, value in (("betas", betas), ("alphas", alphas), ("alpha_bars", np.cumprod(alphas))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValidationError(f"timestep {t} outside [1, {self.num_steps}]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_noise_schedule(d["num_steps"], d.get("kind", "linear"), d["beta_start"], d["beta_end"])


def make_noise_schedule(
    num_steps: int, kind: str = "linear", beta_start: float = 0.00085, beta_end: float = 0.012
) -> NoiseSchedule:
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ValidationError(f"num_steps must be a positive integer, got {num_steps!r}")
    if kind != "linear":
        raise ValidationError(f"unknown schedule kind {kind!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(num_steps), dtype=np.float64)
    return NoiseSchedule(int(num_steps), betas, kind=kind, beta_start=float(beta_start), beta_end=float(beta_end))


@dataclass(frozen=True)
class LatentState:
    """A latent array (channels x height x width) tagged with its timestep."""

    values: object
    timestep: int = 0

    @property
    def shape(self):
        return tuple(self.values.shape)


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_step(z_prev, alpha_t: float, noise):
    """sqrt(a) * z_prev + sqrt(1 - a) * noise on raw arrays."""
    if not (0 < alpha_t <= 1):
        raise ValidationError(f"alpha_t must be in (0, 1], got {alpha_t}")
    _check_same_shape(z_prev, noise, "forward_noise_step")
    return math.sqrt(alpha_t) * z_prev + math.sqrt(1.0 - alpha_t) * noise


def q_sample(z0, alpha_bar: float, noise):
    """Closed-form jump from the clean latent: sqrt(abar) z0 + sqrt(1 - abar) noise."""
    _check_same_shape(z0, noise, "forward_noise_to")
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * noise


def forward_noise_step(z_prev: LatentState, alpha_t: float, noise) -> LatentState:
    return LatentState(q_step(z_prev.values, alpha_t, noise), z_prev.timestep + 1)


def forward_noise_to(z0: LatentState, t: int, schedule: NoiseSchedule, noise) -> LatentState:
    if z0.timestep != 0:
        raise ValidationError(f"forward_noise_to expects a clean latent, got timestep {z0.timestep}")
    return LatentState(q_sample(z0.values, schedule.alpha_bar(t), noise), t)


def predict_clean(z_t, eps_hat, t: int, schedule: NoiseSchedule):
    """Invert the closed-form jump given a noise estimate."""
    ab = schedule.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def reverse_step(z_t, eps_hat, t: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) step from timestep t to t - 1."""
    z0_hat = predict_clean(z_t, eps_hat, t, schedule)
    if t == 1:
        return z0_hat
    ab_prev = schedule.alpha_bar(t - 1)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ldm_loss(eps_pred, eps_true):
    """Mean squared error between predicted and true noise.

    Returns a python float for numpy inputs and a 0-d tensor for torch inputs
    (so it can be backpropagated).
    """
    _check_same_shape(eps_pred, eps_true, "ldm_loss")
    diff = eps_pred - eps_true
    loss = (diff * diff).mean()
    if isinstance(loss, np.generic) or isinstance(loss, np.ndarray):
        return float(loss)
    return loss
