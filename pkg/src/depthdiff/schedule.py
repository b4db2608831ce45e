"""Per-timestep constants of the forward and reverse diffusion processes.

A schedule is fully determined by the per-step variance increments
``beta[0..T-1]``.  Everything else is derived:

    alpha_t      = 1 - beta_t
    alpha_bar_t  = prod_{s<=t} alpha_s
    beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t
    snr_t        = alpha_bar_t / (1 - alpha_bar_t)

Timesteps are indexed ``t in {0, ..., T-1}``; index 0 is the first (least
noisy) step.  ``beta_tilde[0]`` is defined as 0, i.e. the cumulative product
"previous" to step 0 is taken to be 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable container of diffusion constants, all float64 arrays of length T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    beta_tilde: np.ndarray = field(repr=False)
    snr: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.T < 2:
            raise ValueError(f"schedule needs at least 2 steps, got T={self.T}")
        for name in ("beta", "alpha", "alpha_bar", "beta_tilde", "snr"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
        if not np.all((self.beta > 0.0) & (self.beta < 1.0)):
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[0] >= 1.0:
            raise ValueError("alpha_bar[0] must be < 1")

    @property
    def terminal_alpha_bar(self) -> float:
        """alpha_bar at the last step; < 1e-3 for schedules meant for sampling
        from a standard-normal prior.  Deliberately not enforced at
        construction so that short analysis schedules remain expressible."""
        return float(self.alpha_bar[-1])

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative product one step before t, with the t=0 convention of 1."""
        return float(self.alpha_bar[t - 1]) if t > 0 else 1.0


def _from_betas(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    # Eq. for the tractable-posterior variance; 0 at t=0 by convention.
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    snr = alpha_bar / (1.0 - alpha_bar)
    return NoiseSchedule(
        T=len(beta), beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        beta_tilde=beta_tilde, snr=snr,
    )


def build_cosine_schedule(T: int) -> NoiseSchedule:
    """Squared-cosine noise profile with offset s=0.008.

    The target cumulative product is f(t)/f(0) with
    f(t) = cos(((t/T + s)/(1 + s)) * pi/2)^2; per-step betas are derived from
    consecutive ratios and clipped to at most 0.999, and the stored
    ``alpha_bar`` is the cumulative product of the clipped betas so that the
    two stay consistent.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math.pi / 2.0) ** 2
    beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, MAX_BETA)
    return _from_betas(beta)


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Arithmetic beta ramp from beta_start to beta_end inclusive."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return _from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def p2_weight(s: NoiseSchedule, t: int, k: float = 1.0, gamma: float = 1.0) -> float:
    """Loss multiplier 1/(k + snr_t)^gamma applied on top of the simple loss.

    gamma=0 disables the reweighting (returns 1 for every step).
    """
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")
    if k <= 0.0:
        raise ValueError(f"k must be > 0, got {k}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return float(1.0 / (k + s.snr[t]) ** gamma)
