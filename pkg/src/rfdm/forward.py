"""Forward (noising) processes: frame prediction and residual flow.

Functions accept numpy arrays or torch tensors. ``s`` may be a scalar or one
value per leading (batch) element.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

import numpy as np

from .schedule import NoiseSchedule, eval_schedule, gamma


class Formulation(str, enum.Enum):
    FRAME_PREDICTION = "frame_prediction"
    RESIDUAL_FLOW = "residual_flow"


@dataclass
class NoisyFrame:
    y_s: Any
    s: Any
    eps: Any
    prev: Any


def _broadcast(coef, like):
    """Shape per-sample coefficients to broadcast over the trailing dims of ``like``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim:
        coef = coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))
    if hasattr(like, "new_tensor"):
        return like.new_tensor(coef) if coef.ndim else float(coef)
    return coef.astype(like.dtype) if coef.ndim else like.dtype.type(coef)


def _check_dims(*arrays):
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def _zeros_like(a):
    return a.new_zeros(a.shape) if hasattr(a, "new_zeros") else np.zeros_like(a)


def forward_frame(y0, s, eps, sched: NoiseSchedule) -> NoisyFrame:
    """y_s = alpha * y0 + sigma * eps."""
    _check_dims(y0, eps)
    alpha, sigma, _ = eval_schedule(sched, s)
    y_s = _broadcast(alpha, y0) * y0 + _broadcast(sigma, y0) * eps
    return NoisyFrame(y_s, s, eps, _zeros_like(y0))


def forward_residual(y0, prev, s, eps, sched: NoiseSchedule) -> NoisyFrame:
    """y_s = alpha * y0 + sigma * prev + sigma * eps: the noise mean is shifted to ``prev``."""
    _check_dims(y0, prev, eps)
    alpha, sigma, _ = eval_schedule(sched, s)
    a, sg = _broadcast(alpha, y0), _broadcast(sigma, y0)
    y_s = a * y0 + sg * eps
    y_s = y_s + sg * prev
    return NoisyFrame(y_s, s, eps, prev)


def forward(formulation: Formulation, y0, prev, s, eps, sched: NoiseSchedule) -> NoisyFrame:
    if Formulation(formulation) is Formulation.RESIDUAL_FLOW:
        return forward_residual(y0, prev, s, eps, sched)
    nf = forward_frame(y0, s, eps, sched)
    nf.prev = prev
    return nf


def forward_mean_cov(y0, prev, s, sched: NoiseSchedule, formulation: Formulation):
    """Analytic (mean, scalar variance) of q(y_s | y0, prev)."""
    alpha, sigma, _ = eval_schedule(sched, s)
    if Formulation(formulation) is Formulation.RESIDUAL_FLOW:
        mean = alpha * np.asarray(y0) + sigma * np.asarray(prev)
    else:
        mean = alpha * np.asarray(y0)
    return mean, sigma**2


def residual_mean(y0, prev, s, sched: NoiseSchedule):
    """The same residual-flow mean written as gamma * y0 + sigma * (prev - y0)."""
    _, sigma, _ = eval_schedule(sched, s)
    return gamma(sched, s) * np.asarray(y0) + sigma * temporal_residual(y0, prev)


def temporal_residual(y0, prev):
    """Diagnostic inter-frame residual prev - y0; never stored."""
    return np.asarray(prev) - np.asarray(y0)
