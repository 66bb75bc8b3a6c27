"""Cosine variance-preserving noise schedule over continuous diffusion time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha(s) = cos(pi s / 2), sigma(s) = sin(pi s / 2), with s clipped to [s_min, s_max]."""

    kind: str = "cosine_vp"
    s_min: float = 1e-3
    s_max: float = 1.0 - 1e-3
    lambda_clamp: float = 20.0

    def __post_init__(self):
        if self.kind != "cosine_vp":
            raise ScheduleDomainError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.s_min < 0.5 or not 0.5 < self.s_max <= 1.0:
            raise ScheduleDomainError(f"bad schedule range [{self.s_min}, {self.s_max}]")
        if not self.lambda_clamp > 0:
            raise ScheduleDomainError("lambda_clamp must be positive")

    def clip(self, s):
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ScheduleDomainError("diffusion time must be finite")
        return np.clip(s, self.s_min, self.s_max)


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def eval_schedule(sched: NoiseSchedule, s):
    """Return (alpha, sigma, lambda) at diffusion time(s) ``s``.

    Works elementwise on arrays. Lambda is log(alpha / sigma), clamped to
    +/- ``sched.lambda_clamp``.
    """
    s = sched.clip(s)
    alpha = np.cos(0.5 * np.pi * s)
    sigma = np.sin(0.5 * np.pi * s)
    with np.errstate(divide="ignore"):
        lam = np.log(alpha) - np.log(sigma)
    lam = np.clip(lam, -sched.lambda_clamp, sched.lambda_clamp)
    return _scalar_or_array(alpha), _scalar_or_array(sigma), _scalar_or_array(lam)


def gamma(sched: NoiseSchedule, s):
    """Residual-flow mean coefficient sqrt(1 - sigma^2) + sigma (= alpha + sigma under VP)."""
    _, sigma, _ = eval_schedule(sched, s)
    sigma = np.asarray(sigma)
    return _scalar_or_array(np.sqrt(1.0 - sigma**2) + sigma)


def step_grid(sched: NoiseSchedule, S: int) -> list[float]:
    """S+1 uniformly spaced diffusion times from s_max down to s_min."""
    if int(S) != S or S < 1:
        raise ScheduleDomainError(f"need at least one step, got S={S}")
    S = int(S)
    span = sched.s_max - sched.s_min
    grid = [sched.s_min + span * (i / S) for i in range(S, -1, -1)]
    # pin the endpoints exactly
    grid[0], grid[-1] = sched.s_max, sched.s_min
    return grid

