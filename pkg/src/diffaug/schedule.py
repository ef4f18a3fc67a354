"""Noise schedules for the binary edge-diffusion chain.

The forward chain keeps an edge bit with probability alpha_t per step and
otherwise resamples it toward the converging probability pi; the cumulative
retention abar_t = prod alpha_i must decay to (near) zero so the chain ends
at the pi-prior. pi = 0 is the absorbing kernel (edges only vanish),
pi = 0.5 the uniform kernel, and pi = dataset density the predefined one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["NoiseSchedule", "build_schedule", "DEFAULT_T"]

DEFAULT_T = 128

_ALPHA_MIN = 1e-5
_ALPHA_MAX = 1.0 - 1e-12
_ABAR_FINAL = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray      # alpha[t-1] = alpha^t, t = 1..T
    alpha_bar: np.ndarray  # alpha_bar[t-1] = abar^t
    pi: float

    def a(self, t: int) -> float:
        """Per-step retention alpha^t, t in [1, T]."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        """Cumulative retention abar^t, with abar^0 = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def _cosine_abar(T: int, s: float = 0.008) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
    return f / f[0]


def _linear_abar(T: int) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    return 1.0 - (1.0 - _ABAR_FINAL) * (t / T)


def build_schedule(T: int = DEFAULT_T, kind: str = "cosine",
                   pi: float = 0.0) -> NoiseSchedule:
    """Build a schedule of horizon T with the named abar shape.

    Per-step alphas are clipped into [1e-5, 1 - 1e-12] and abar recomputed
    from the clipped values, so abar is strictly decreasing and the final
    abar^T stays at or below 1e-4.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 <= pi < 1.0:
        raise ConfigError(f"pi must be in [0, 1), got {pi}")
    if kind == "cosine":
        abar_raw = _cosine_abar(T)
    elif kind == "linear":
        abar_raw = _linear_abar(T)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = abar_raw[1:] / abar_raw[:-1]
    alpha = np.clip(alpha, _ALPHA_MIN, _ALPHA_MAX)
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] > _ABAR_FINAL:
        raise ConfigError(
            f"schedule {kind!r} with T={T} leaves abar^T={alpha_bar[-1]:.3e} "
            f"above {_ABAR_FINAL:.0e}"
        )
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=alpha_bar, pi=float(pi))
