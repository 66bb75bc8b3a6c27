"""Autoregressive training: teacher or diffusion forcing over sorted frame chains."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .config import RunConfig, dumps, load, training_hash
from .denoiser import ConditioningSet, build_denoiser, export_params, import_params
from .forward import Formulation, forward
from .sample import to_model_space
from .schedule import NoiseSchedule, eval_schedule
from .synthvid import PromptSpec, prompt_index

log = logging.getLogger(__name__)

# conditioning-dropout branches
KEEP, DROP_PROMPT, DROP_BOTH = 0, 1, 2
BRANCH_NAMES = ("x,p", "x,null", "null,null")


class TrainingError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class ResumeMismatchError(RuntimeError):
    pass


@dataclass
class TrainStepTrace:
    step: int
    frames: list = field(default_factory=list)  # dicts: micro, b, t, s, loss, branch
    loss: float = 0.0
    grad_norm: float = 0.0
    branches: dict = field(default_factory=dict)


def sample_branches(rng: np.random.Generator, n: int, drop_both_p: float, drop_prompt_p: float) -> np.ndarray:
    u = rng.random(n)
    return np.where(u < drop_both_p, DROP_BOTH, np.where(u < drop_both_p + drop_prompt_p, DROP_PROMPT, KEEP))


def apply_conditioning_dropout(cond: ConditioningSet, rng: np.random.Generator, drop_both_p: float = 0.05,
                               drop_prompt_p: float = 0.05) -> ConditioningSet:
    """Randomly drop (x, p) or just p; ``prev`` is always kept."""
    branch = sample_branches(rng, 1, drop_both_p, drop_prompt_p)[0]
    if branch == DROP_BOTH:
        return ConditioningSet(cond.prev)
    if branch == DROP_PROMPT:
        return ConditioningSet(cond.prev, cond.x)
    return cond


def sample_frame_indices(rng: np.random.Generator, n_frames: int, K: int, consecutive: bool = False) -> np.ndarray:
    """K+1 sorted distinct frame indices from [0, n_frames)."""
    if K + 1 > n_frames:
        raise ValueError(f"K + 1 = {K + 1} exceeds clip length {n_frames}")
    if consecutive:
        start = int(rng.integers(0, n_frames - K))
        return np.arange(start, start + K + 1)
    return np.sort(rng.choice(n_frames, size=K + 1, replace=False))


def chain_loss(model, inputs, targets, prompt_idx, cfg: RunConfig, rng: np.random.Generator,
               sched: NoiseSchedule, trace: TrainStepTrace | None = None, micro: int = 0):
    """Summed per-frame MSE over one micro-batch of autoregressive chains.

    ``inputs``/``targets`` are model-space [B, T+1, C, H, W]; ``prompt_idx`` is [B] long.
    """
    tc = cfg.train
    B, T1 = inputs.shape[:2]
    formulation = Formulation(tc.formulation)
    null = cfg.denoiser_config().vocab_size
    idx = np.stack([sample_frame_indices(rng, T1, tc.K, tc.consecutive) for _ in range(B)])
    rows = torch.arange(B)
    prev = torch.zeros_like(inputs[:, 0])
    total = inputs.new_zeros(())
    for i in range(tc.K + 1):
        t = torch.from_numpy(idx[:, i])
        y0, x = targets[rows, t], inputs[rows, t]
        s = rng.uniform(sched.s_min, sched.s_max, size=B)
        eps = torch.from_numpy(rng.standard_normal(y0.shape).astype(np.float32))
        branch = sample_branches(rng, B, tc.drop_both_p, tc.drop_prompt_p)
        present = torch.from_numpy((branch != DROP_BOTH).astype(np.float32))
        pidx = torch.where(torch.from_numpy(branch == KEEP), prompt_idx, torch.full_like(prompt_idx, null))
        _, _, lam = eval_schedule(sched, s)
        y_s = forward(formulation, y0, prev, s, eps, sched).y_s
        pred = model(y_s, x, present, prev, pidx, torch.from_numpy(np.asarray(lam, dtype=np.float32)))
        per = (pred - y0).pow(2).mean(dim=(1, 2, 3))
        total = total + per.sum()
        if trace is not None:
            for b in range(B):
                trace.frames.append({"micro": micro, "b": b, "t": int(idx[b, i]), "s": float(s[b]),
                                     "loss": float(per[b].detach()), "branch": BRANCH_NAMES[branch[b]]})
        if tc.forcing == "teacher":
            prev = y0
        else:
            prev = pred if tc.unroll else pred.detach()
    return total


class ClipStore:
    """Train-split clips from a manifest, read lazily in model space."""

    def __init__(self, manifest_path, split: str = "train"):
        self.root = Path(manifest_path).parent
        self.records = [r for r in tensorio.read_manifest(manifest_path) if r["meta"].get("split") == split]
        if not self.records:
            raise TrainingError(f"no '{split}' clips in {manifest_path}")
        self.prompt_idx = torch.tensor(
            [prompt_index(PromptSpec.from_list(r["prompt"])) for r in self.records], dtype=torch.long)

    def __len__(self):
        return len(self.records)

    @lru_cache(maxsize=4096)
    def clip(self, i: int):
        r = self.records[i]
        x = torch.from_numpy(tensorio.read_tensor(self.root / r["input_path"])).permute(0, 3, 1, 2)
        y = torch.from_numpy(tensorio.read_tensor(self.root / r["target_path"])).permute(0, 3, 1, 2)
        return to_model_space(x).contiguous(), to_model_space(y).contiguous()

    def batch(self, ids):
        pairs = [self.clip(int(i)) for i in ids]
        return (torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs]),
                self.prompt_idx[torch.as_tensor(np.asarray(ids), dtype=torch.long)])


class Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.sched = cfg.noise_schedule()
        self.model = build_denoiser(cfg.denoiser_config(), seed=cfg.model.seed)
        tc = cfg.train
        self.opt = torch.optim.Adam(self.model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2), foreach=False)
        self.rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x7A1]))
        self.step = 0

    # --- persistence ---------------------------------------------------------

    def save(self, ckpt_dir) -> None:
        names = dict((id(p), n) for n, p in self.model.named_parameters())
        moments = {"exp_avg": {}, "exp_avg_sq": {}}
        for p, st in self.opt.state.items():
            for m in moments:
                moments[m][names[id(p)]] = st[m].numpy()
        state = {
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "training_hash": training_hash(self.cfg),
        }
        tensorio.save_checkpoint(ckpt_dir, export_params(self.model), moments, state)
        tensorio.atomic_write_bytes(Path(ckpt_dir) / "config.toml", dumps(self.cfg))

    @classmethod
    def load(cls, ckpt_dir, cfg: RunConfig | None = None) -> "Trainer":
        ckpt_dir = Path(ckpt_dir)
        stored = load(ckpt_dir / "config.toml")
        cfg = stored if cfg is None else cfg
        params, moments, state = tensorio.load_checkpoint(ckpt_dir)
        if state["training_hash"] != training_hash(cfg):
            raise ResumeMismatchError(
                f"config hash {training_hash(cfg)[:12]} does not match checkpoint {state['training_hash'][:12]}")
        tr = cls(cfg)
        import_params(tr.model, params)
        tr.step = int(state["step"])
        tr.rng.bit_generator.state = state["rng"]
        by_name = dict(tr.model.named_parameters())
        for name in moments.get("exp_avg", {}):
            p = by_name[name]
            tr.opt.state[p] = {
                "step": torch.tensor(float(tr.step)),
                "exp_avg": torch.from_numpy(moments["exp_avg"][name].copy()),
                "exp_avg_sq": torch.from_numpy(moments["exp_avg_sq"][name].copy()),
            }
        return tr


def train_step(trainer: Trainer, data: ClipStore) -> TrainStepTrace:
    """One optimizer update over ``grad_accum`` micro-batches of ``batch`` chains each."""
    tc = trainer.cfg.train
    trace = TrainStepTrace(step=trainer.step + 1)
    trainer.model.train()
    trainer.opt.zero_grad(set_to_none=True)
    total = 0.0
    for micro in range(tc.grad_accum):
        ids = trainer.rng.integers(0, len(data), size=tc.batch)
        inputs, targets, pidx = data.batch(ids)
        loss = chain_loss(trainer.model, inputs, targets, pidx, trainer.cfg, trainer.rng, trainer.sched, trace, micro)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {trace.step}", trace)
        loss.backward()
        total += float(loss.detach())
    grads = [p.grad for p in trainer.model.parameters() if p.grad is not None]
    trace.grad_norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
    if not np.isfinite(trace.grad_norm):
        raise TrainingError(f"non-finite gradient at step {trace.step}", trace)
    trainer.opt.step()
    trainer.step += 1
    trace.loss = total
    for f in trace.frames:
        trace.branches[f["branch"]] = trace.branches.get(f["branch"], 0) + 1
    return trace


def run_training(manifest_path, cfg: RunConfig, out_dir, resume=None) -> Path:
    """Train for ``cfg.train.steps`` updates; returns the final checkpoint directory.

    Writes ``loss.jsonl`` (one row per step), periodic ``checkpoints/step_XXXXXX``
    and ``final``. With ``resume`` the run continues bit-exactly from that checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = ClipStore(manifest_path, "train")
    trainer = Trainer.load(resume, cfg) if resume is not None else Trainer(cfg)
    loss_path = out_dir / "loss.jsonl"
    rows = []
    if resume is not None and loss_path.exists():
        rows = [l for l in loss_path.read_text().splitlines() if l and json.loads(l)["step"] <= trainer.step]
    if resume is not None and not rows:
        src = Path(resume).parent.parent / "loss.jsonl"
        if src.exists():
            rows = [l for l in src.read_text().splitlines() if l and json.loads(l)["step"] <= trainer.step]
    with open(loss_path, "w") as f:
        for l in rows:
            f.write(l + "\n")
        while trainer.step < cfg.train.steps:
            tr = train_step(trainer, data)
            f.write(json.dumps({"step": tr.step, "loss": tr.loss, "grad_norm": tr.grad_norm}) + "\n")
            f.flush()
            if tr.step % 50 == 0:
                log.info("step %d loss %.5f grad_norm %.4f", tr.step, tr.loss, tr.grad_norm)
            if tr.step % cfg.train.checkpoint_every == 0:
                trainer.save(out_dir / "checkpoints" / f"step_{tr.step:06d}")
    final = out_dir / "final"
    trainer.save(final)
    return final


def load_model(ckpt_dir):
    """Load a trained denoiser (eval mode) and the run config stored with it."""
    tr = Trainer.load(ckpt_dir)
    tr.model.eval()
    return tr.model, tr.cfg
