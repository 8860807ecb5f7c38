"""Forward-diffusion variance schedules and the noising process q(x_t | x_0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """A variance schedule over time-steps 1..T with precomputed cumulative terms.

    ``betas[t-1]`` is the per-step noise variance, ``alpha_bars[t-1]`` the
    cumulative product of ``1 - beta``, and ``gammas[t-1]`` the factor that
    converts a pixel-space distance into the argument of the two-Gaussian
    discrimination-error formula:

        gamma_t = sqrt(alpha_bar_t) / (2 * sqrt(2 * (1 - alpha_bar_t)))

    Time-steps are 1-indexed everywhere; t=0 is not a schedule index (the
    clean image is represented as x0 itself).  Instances are immutable and
    safe to share across threads.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    gammas: np.ndarray

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def gamma(self, t: int) -> float:
        self._check_t(t)
        return float(self.gammas[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"time-step {t} outside 1..{self.T}")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Build a schedule with betas linearly interpolated over both endpoints.

    The defaults (T=1000, beta from 1e-4 to 0.02) are the standard choice for
    pixel-space diffusion at this scale.
    """
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bars = np.cumprod(1.0 - betas)
    gammas = np.sqrt(alpha_bars) / (2.0 * np.sqrt(2.0 * (1.0 - alpha_bars)))
    for arr in (betas, alpha_bars, gammas):
        arr.flags.writeable = False
    return Schedule(T=T, betas=betas, alpha_bars=alpha_bars, gammas=gammas)


def forward_sample(s: Schedule, x0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Draw x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise.

    The noise tensor is supplied by the caller (standard-normal draws in
    production, a forced vector in tests) so every stochastic consumer owns
    its seed.
    """
    s._check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    ab = s.alpha_bars[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
