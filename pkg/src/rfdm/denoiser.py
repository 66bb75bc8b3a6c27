"""Clean-frame (x-parameterized) denoiser.

The noisy frame, the input frame and the previous clean prediction enter by
channel concatenation; the prompt and the log-SNR enter through FiLM. A
missing input frame is a zero tensor plus a presence channel, a missing
prompt selects a dedicated learned null row of the embedding table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .synthvid import VOCAB_SIZE, PromptSpec, prompt_index


class DenoiserError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    hidden: int = 64
    blocks: int = 6
    emb_dim: int = 64
    n_freqs: int = 8
    groups: int = 8
    # False drops the previous-prediction input channels (x-only conditioning)
    use_prev: bool = True
    vocab_size: int = VOCAB_SIZE


@dataclass
class ConditioningSet:
    """Conditioning for one frame. ``x``/``prompt`` may be None (the null condition)."""

    prev: np.ndarray | torch.Tensor
    x: np.ndarray | torch.Tensor | None = None
    prompt: PromptSpec | None = None


def lambda_features(lam: torch.Tensor, n_freqs: int) -> torch.Tensor:
    # clamped log-SNR lives in roughly [-20, 20]
    lam = lam.reshape(-1, 1) / 20.0
    freqs = math.pi * 2.0 ** torch.arange(n_freqs, dtype=lam.dtype, device=lam.device)
    ang = lam * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, hidden: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, hidden)
        self.conv1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * hidden)
        self.norm2 = nn.GroupNorm(groups, hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)

    def forward(self, h, emb):
        scale, shift = self.film(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        z = self.conv1(F.silu(self.norm1(h)))
        z = self.norm2(z) * (1 + scale) + shift
        return h + self.conv2(F.silu(z))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        self.null_prompt = cfg.vocab_size
        self.inp = nn.Conv2d(3 * C + 1, cfg.hidden, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(2 * cfg.n_freqs, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim)
        )
        # rows 0..V-1 are vocabulary prompts, row V is the learned null prompt
        self.prompt_emb = nn.Embedding(cfg.vocab_size + 1, cfg.emb_dim)
        self.blocks = nn.ModuleList(ResBlock(cfg.hidden, cfg.emb_dim, cfg.groups) for _ in range(cfg.blocks))
        self.out_norm = nn.GroupNorm(cfg.groups, cfg.hidden)
        self.out = nn.Conv2d(cfg.hidden, C, 3, padding=1)

    def forward(self, y_s, x, x_present, prev, prompt_idx, lam):
        """All image tensors are [B, C, H, W]; ``x_present``/``lam`` are [B], ``prompt_idx`` is [B] long."""
        if not (y_s.shape == x.shape == prev.shape):
            raise DenoiserError(f"shape mismatch: y_s {tuple(y_s.shape)}, x {tuple(x.shape)}, prev {tuple(prev.shape)}")
        B, _, H, W = y_s.shape
        present = x_present.to(y_s.dtype).reshape(B, 1, 1, 1)
        if not self.cfg.use_prev:
            prev = torch.zeros_like(prev)
        h = torch.cat([y_s, x * present, present.expand(B, 1, H, W), prev], dim=1)
        h = self.inp(h)
        emb = self.time_mlp(lambda_features(lam.to(y_s.dtype), self.cfg.n_freqs)) + self.prompt_emb(prompt_idx)
        for blk in self.blocks:
            h = blk(h, emb)
        return self.out(F.silu(self.out_norm(h)))


def build_denoiser(cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(cfg)


def export_params(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def import_params(model: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = set(state) - set(params)
    extra = set(params) - set(state)
    if missing or extra:
        raise DenoiserError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in params.items()})


# --- single-frame API ------------------------------------------------------


def to_nchw(frame) -> torch.Tensor:
    """[H, W, C] or [B, H, W, C] -> [B, C, H, W] float32 tensor."""
    t = torch.as_tensor(np.asarray(frame, dtype=np.float32)) if not torch.is_tensor(frame) else frame
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).contiguous()


def to_nhwc(t: torch.Tensor) -> torch.Tensor:
    return t.permute(0, 2, 3, 1)


def pack_conditioning(model: Denoiser, conds: list[ConditioningSet], like: torch.Tensor):
    """Batch a list of ConditioningSets into (x, x_present, prev, prompt_idx) tensors."""
    xs, present, prevs, idx = [], [], [], []
    for c in conds:
        prev = c.prev if torch.is_tensor(c.prev) else to_nchw(c.prev)[0]
        if tuple(prev.shape) != tuple(like.shape[1:]):
            raise DenoiserError(f"prev shape {tuple(prev.shape)} != frame shape {tuple(like.shape[1:])}")
        prevs.append(prev)
        if c.x is None:
            xs.append(torch.zeros_like(prevs[-1]))
            present.append(0.0)
        else:
            x = c.x if torch.is_tensor(c.x) else to_nchw(c.x)[0]
            if tuple(x.shape) != tuple(like.shape[1:]):
                raise DenoiserError(f"x shape {tuple(x.shape)} != frame shape {tuple(like.shape[1:])}")
            xs.append(x)
            present.append(1.0)
        idx.append(model.null_prompt if c.prompt is None else prompt_index(c.prompt))
    return (torch.stack(xs), like.new_tensor(present), torch.stack(prevs),
            torch.tensor(idx, dtype=torch.long))


@dataclass
class ForwardCache:
    inputs: dict
    output: torch.Tensor


def denoise(model: Denoiser, y_s, cond: ConditioningSet, lambda_s: float, cache: bool = False):
    """Predict the clean frame for one [H, W, C] noisy frame.

    With ``cache=True`` returns ``(y_pred, ForwardCache)`` for ``denoise_backward``.
    """
    if not np.isfinite(lambda_s):
        raise DenoiserError("lambda_s must be finite")
    y = to_nchw(y_s).clone()
    x, present, prev, idx = pack_conditioning(model, [cond], y)
    lam = y.new_tensor([lambda_s])
    if cache:
        y.requires_grad_(True)
        prev = prev.clone().requires_grad_(True)
        with torch.enable_grad():
            out = model(y, x, present, prev, idx, lam)
    else:
        with torch.no_grad():
            out = model(y, x, present, prev, idx, lam)
    if not torch.isfinite(out).all():
        raise DenoiserError("non-finite activations in denoiser output")
    y_pred = to_nhwc(out)[0].detach().numpy()
    if cache:
        return y_pred, ForwardCache({"y_s": y, "prev": prev}, out)
    return y_pred


def denoise_backward(model: Denoiser, upstream_grad, cache: ForwardCache | None):
    """Gradients of <upstream_grad, y_pred> w.r.t. every parameter and the y_s / prev inputs."""
    if cache is None or not cache.output.requires_grad:
        raise DenoiserError("no cached forward pass; call denoise(..., cache=True) first")
    g = to_nchw(upstream_grad).to(cache.output.dtype)
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    leaves = params + [cache.inputs["y_s"], cache.inputs["prev"]]
    grads = torch.autograd.grad(cache.output, leaves, grad_outputs=g, retain_graph=True, allow_unused=True)
    grads = [torch.zeros_like(l) if gr is None else gr for l, gr in zip(leaves, grads)]
    param_grads = {n: gr.numpy().copy() for n, gr in zip(names, grads[: len(names)])}
    input_grads = {
        "y_s": to_nhwc(grads[-2])[0].numpy().copy(),
        "prev": to_nhwc(grads[-1])[0].numpy().copy(),
    }
    return param_grads, input_grads
