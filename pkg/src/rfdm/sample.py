"""Autoregressive DDIM editing with triple classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .denoiser import ConditioningSet, Denoiser, to_nchw
from .forward import Formulation
from .schedule import NoiseSchedule, eval_schedule, step_grid
from .synthvid import PromptSpec, prompt_index


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    S: int = 20
    omega_x: float = 1.5
    omega_xp: float = 7.5
    delta: int = 3
    formulation: Formulation = Formulation.RESIDUAL_FLOW
    seed: int = 0
    clip_pred: bool = True
    trace: bool = False

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not (np.isfinite(self.omega_x) and np.isfinite(self.omega_xp)):
            raise ValueError("guidance weights must be finite")
        object.__setattr__(self, "formulation", Formulation(self.formulation))


@dataclass
class EditResult:
    output: np.ndarray  # [T+1, H, W, C], data space [0, 1]
    key_frames: list  # key_frames[t] is the output index conditioning frame t (None for t = 0)
    traces: list = field(default_factory=list)


def to_model_space(frames):
    return 2.0 * frames - 1.0


def to_data_space(frames):
    return (frames + 1.0) * 0.5


def cfg_combine(y_null, y_x, y_xp, omega_x, omega_xp):
    """y_null + wx (y_x - y_null) + wxp (y_xp - y_x), expanded per branch.

    The expanded form makes (1, 1) return ``y_xp`` and (0, 0) return ``y_null`` exactly.
    """
    return (1.0 - omega_x) * y_null + (omega_x - omega_xp) * y_x + omega_xp * y_xp


def ddim_update(y_s, y_pred, alpha_from, sigma_from, alpha_to, sigma_to):
    if np.any(np.asarray(sigma_from) < 1e-8):
        raise SamplingError(f"sigma_from={sigma_from} too small for a DDIM step")
    eps_hat = (y_s - alpha_from * y_pred) / sigma_from
    return alpha_to * y_pred + sigma_to * eps_hat


def ddim_step(y_s, y_pred, s_from: float, s_to: float, sched: NoiseSchedule):
    """Deterministic DDIM move from ``s_from`` to ``s_to``.

    Reaching the clean end of the grid (``s_to <= s_min``) returns ``y_pred``.
    """
    if not s_from > s_to:
        raise SamplingError(f"need s_from > s_to, got {s_from} <= {s_to}")
    alpha_f, sigma_f, _ = eval_schedule(sched, s_from)
    if s_to <= sched.s_min:
        if sigma_f < 1e-8:
            raise SamplingError(f"sigma_from={sigma_f} too small for a DDIM step")
        return y_pred
    alpha_t, sigma_t, _ = eval_schedule(sched, s_to)
    return ddim_update(y_s, y_pred, alpha_f, sigma_f, alpha_t, sigma_t)


def key_frame_index(t: int, delta: int):
    """Output frame that supplies both the noise shift and the clean conditioning for frame t."""
    if t == 0:
        return None
    if delta == 0:
        return 0
    return delta * ((t - 1) // delta)


# A generic denoiser: (y_s [H,W,C], ConditioningSet, lambda_s) -> y_pred [H,W,C]
DenoiseFn = Callable[[np.ndarray, ConditioningSet, float], np.ndarray]


def _three_calls(denoiser, y, x, prev, prompts, lam):
    """Evaluate the (null, null), (x, null), (x, p) branches for a batch of N frames.

    All tensors are model-space [N, C, H, W]. Returns three [N, C, H, W] tensors.
    """
    N = y.shape[0]
    if isinstance(denoiser, Denoiser):
        null = denoiser.null_prompt
        pidx = [prompt_index(p) for p in prompts]
        idx = torch.tensor([null] * N + [null] * N + pidx, dtype=torch.long)
        present = y.new_tensor([0.0] * N + [1.0] * (2 * N))
        xs = torch.cat([torch.zeros_like(x), x, x])
        lam_t = y.new_full((3 * N,), float(lam))
        with torch.no_grad():
            out = denoiser(y.repeat(3, 1, 1, 1), xs, present, prev.repeat(3, 1, 1, 1), idx, lam_t)
        return out[:N], out[N:2 * N], out[2 * N:]
    outs = ([], [], [])
    for i in range(N):
        yi = y[i].permute(1, 2, 0).numpy()
        pi = prev[i].permute(1, 2, 0).numpy()
        xi = x[i].permute(1, 2, 0).numpy()
        for k, cond in enumerate((ConditioningSet(pi), ConditioningSet(pi, xi), ConditioningSet(pi, xi, prompts[i]))):
            outs[k].append(to_nchw(np.asarray(denoiser(yi, cond, lam), dtype=np.float32))[0])
    return tuple(torch.stack(o) for o in outs)


def _edit_frames(denoiser, x, prev, prompts, cfg: SamplerConfig, eps, sched, traces=None, t_index=0):
    """Run the S-step guided DDIM loop on N frames at once (model space, [N, C, H, W])."""
    if cfg.formulation is Formulation.RESIDUAL_FLOW:
        y = prev + eps
    else:
        y = eps.clone()
    grid = step_grid(sched, cfg.S)
    for k in range(cfg.S):
        s_from, s_to = grid[k], grid[k + 1]
        _, _, lam = eval_schedule(sched, s_from)
        y_null, y_x, y_xp = _three_calls(denoiser, y, x, prev, prompts, lam)
        y_pred = cfg_combine(y_null, y_x, y_xp, cfg.omega_x, cfg.omega_xp)
        if cfg.clip_pred:
            y_pred = y_pred.clamp(-1.0, 1.0)
        y = ddim_step(y, y_pred, s_from, s_to, sched)
        if not torch.isfinite(y).all():
            raise SamplingError(f"non-finite state at frame {t_index}, step {k}")
        if traces is not None:
            traces.append({"t": t_index, "step": k, "s_from": s_from, "s_to": s_to,
                           "state_rms": float(y.pow(2).mean().sqrt())})
    return y


def edit_frame(denoiser, x_t, prev, prompt: PromptSpec, cfg: SamplerConfig, rng: np.random.Generator,
               sched: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Edit one frame in model space. ``x_t``/``prev`` are [H, W, C]; returns the clean frame."""
    x = to_nchw(x_t)
    p = to_nchw(prev)
    eps = torch.from_numpy(rng.standard_normal(x.shape).astype(np.float32))
    y = _edit_frames(denoiser, x, p, [prompt], cfg, eps, sched)
    return y[0].permute(1, 2, 0).numpy()


def edit_videos(denoiser, clips, prompts, cfg: SamplerConfig, rngs, sched: NoiseSchedule = NoiseSchedule()):
    """Edit N clips of equal shape in lockstep; clip n draws its noise from ``rngs[n]``."""
    clips = [np.asarray(c, dtype=np.float32) for c in clips]
    if not clips or any(c.shape != clips[0].shape for c in clips):
        raise ValueError("need a nonempty list of equally shaped clips")
    if clips[0].shape[0] < 1:
        raise ValueError("clip must contain at least one frame")
    T1 = clips[0].shape[0]
    xs = to_model_space(torch.from_numpy(np.stack(clips))).permute(0, 1, 4, 2, 3)  # [N, T+1, C, H, W]
    N = xs.shape[0]
    outputs = torch.zeros_like(xs)
    keys, traces = [], [[] for _ in range(N)]
    for t in range(T1):
        kf = key_frame_index(t, cfg.delta)
        keys.append(kf)
        prev = torch.zeros_like(xs[:, t]) if kf is None else outputs[:, kf]
        eps = torch.from_numpy(np.stack([r.standard_normal(xs.shape[2:]).astype(np.float32) for r in rngs]))
        tr = [] if cfg.trace else None
        try:
            outputs[:, t] = _edit_frames(denoiser, xs[:, t], prev, prompts, cfg, eps, sched, tr, t)
        except SamplingError as e:
            raise SamplingError(f"frame {t}: {e}") from e
        if tr is not None:
            for n in range(N):
                traces[n].extend(tr)
    data = to_data_space(outputs).clamp(0.0, 1.0).permute(0, 1, 3, 4, 2).numpy()
    return [EditResult(data[n], list(keys), traces[n]) for n in range(N)]


def edit_video(denoiser, clip, prompt: PromptSpec, cfg: SamplerConfig, rng: np.random.Generator | None = None,
               sched: NoiseSchedule = NoiseSchedule()) -> EditResult:
    """Edit a [T+1, H, W, C] clip in [0, 1] causally, frame by frame."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return edit_videos(denoiser, [clip], [prompt], cfg, [rng], sched)[0]
