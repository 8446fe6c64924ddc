"""Forward-process noise schedules, per-timestep KL weights and the guidance ramp.

Timesteps are 1-based everywhere in the public API (``t = 1..T``); the arrays
stored on :class:`NoiseSchedule` are 0-based, so ``betas[t - 1]`` is beta_t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid schedule / weighting / ramp configuration."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray
    kind: str = "linear"
    beta_min: float = 0.0
    beta_max: float = 0.0

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        return float(self.posterior_vars[t - 1])

    def describe(self) -> dict:
        return {"kind": self.kind, "T": self.T,
                "beta_min": self.beta_min, "beta_max": self.beta_max}


def scaled_beta_range(T: int) -> tuple[float, float]:
    """The usual (1e-4, 0.02) endpoints rescaled so T steps destroy the signal alike."""
    scale = 1000.0 / T
    return min(1e-4 * scale, 0.999), min(0.02 * scale, 0.999)


def _cosine_betas(T: int, beta_min: float, beta_max: float, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
    ab = f / f[0]
    betas = 1.0 - ab[1:] / ab[:-1]
    return np.clip(betas, beta_min, beta_max)


def make_schedule(kind: str = "linear", T: int = 100,
                  beta_min: float | None = None,
                  beta_max: float | None = None) -> NoiseSchedule:
    """Build a schedule of ``T`` steps.

    ``linear`` interpolates beta linearly from ``beta_min`` to ``beta_max``;
    ``cosine`` uses the squared-cosine signal curve with betas clipped into
    ``[beta_min, beta_max]``. Omitted endpoints default to :func:`scaled_beta_range`.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"schedule.T must be a positive integer, got {T!r}")
    lo, hi = scaled_beta_range(int(T))
    beta_min = lo if beta_min is None else float(beta_min)
    beta_max = hi if beta_max is None else float(beta_max)
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64) if T > 1 \
            else np.array([beta_min], dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(T, beta_min, beta_max)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = betas * (1.0 - prev) / (1.0 - alpha_bars)
    posterior_vars[0] = betas[0]
    for arr in (betas, alphas, alpha_bars, posterior_vars):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, posterior_vars,
                         kind, beta_min, beta_max)


WEIGHT_KINDS = ("uniform", "exp-decay", "linear-ramp")


@dataclass(frozen=True)
class KLWeightConfig:
    kind: str = "exp-decay"
    gamma: float = 1.0
    normalize: bool = True
    reverse: bool = False    # True puts the largest weight at t = T instead of t = 1

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ConfigError(f"unknown weight kind {self.kind!r}")
        if self.gamma < 0:
            raise ConfigError("weights.gamma must be non-negative")


def _raw_weight(kind: str, gamma: float, t, T: int):
    frac = (t - 1) / (T - 1) if T > 1 else 0.0 * t
    if kind == "uniform":
        return 1.0 + 0.0 * frac
    if kind == "exp-decay":
        return np.exp(-gamma * frac)
    return 1.0 + gamma * (1.0 - frac)   # linear-ramp: 1 + gamma (T - t)/(T - 1)


def kl_weights(cfg: KLWeightConfig, T: int) -> np.ndarray:
    """Weights for t = 1..T as a length-T array."""
    t = np.arange(1, T + 1, dtype=np.float64)
    if cfg.reverse:
        t = t[::-1]
    w = np.asarray(_raw_weight(cfg.kind, cfg.gamma, t, T), dtype=np.float64)
    if cfg.normalize and cfg.kind != "uniform":
        w = w * (T / w.sum())
    return w


def kl_weight(cfg: KLWeightConfig, t: int, T: int) -> float:
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside 1..{T}")
    return float(kl_weights(cfg, T)[t - 1])


@dataclass(frozen=True)
class GuidanceRamp:
    g_min: float = 0.0
    g_max: float = 1.0
    ramp_epochs: int = 5

    def __post_init__(self):
        if not (0.0 <= self.g_min <= self.g_max <= 1.0):
            raise ConfigError("guidance ramp needs 0 <= g_min <= g_max <= 1")
        if self.ramp_epochs < 0:
            raise ConfigError("guidance.ramp_epochs must be >= 0")


def guidance_gate(ramp: GuidanceRamp, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch >= ramp.ramp_epochs:
        return ramp.g_max
    frac = epoch / ramp.ramp_epochs
    # the interpolation can round a hair past g_max
    return min(ramp.g_min + (ramp.g_max - ramp.g_min) * frac, ramp.g_max)
