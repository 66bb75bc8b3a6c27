"""Video editing metrics: faithfulness, drift, warping error and edit direction.

Clips are [T+1, H, W, C] arrays. Lower is better for everything but DVS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import tensorio
from .synthvid import warp_backward


class MetricError(ValueError):
    pass


class MissingResultsError(MetricError):
    def __init__(self, missing, report=None):
        super().__init__(f"{len(missing)} result clip(s) missing: {', '.join(missing)}")
        self.missing = list(missing)
        self.report = report


# --- backends --------------------------------------------------------------


@dataclass(frozen=True)
class Distance:
    """Frame distance. ``random_conv_features`` compares outputs of a fixed, seeded random conv net."""

    kind: str = "pixel_mse"
    seed: int = 0
    width: int = 16

    def __post_init__(self):
        if self.kind not in ("pixel_mse", "random_conv_features"):
            raise MetricError(f"unknown distance {self.kind!r}")

    def _filters(self, channels):
        rng = np.random.default_rng(self.seed)
        w1 = rng.standard_normal((self.width, channels, 3, 3)) / np.sqrt(9 * channels)
        w2 = rng.standard_normal((self.width, self.width, 3, 3)) / np.sqrt(9 * self.width)
        return torch.from_numpy(w1), torch.from_numpy(w2)

    def features(self, frame):
        x = torch.from_numpy(np.asarray(frame, dtype=np.float64)).permute(2, 0, 1)[None]
        w1, w2 = self._filters(x.shape[1])
        h = torch.tanh(F.conv2d(x, w1, padding=1))
        h = torch.tanh(F.conv2d(F.avg_pool2d(h, 2, ceil_mode=True), w2, padding=1))
        return h.numpy()

    def __call__(self, a, b) -> float:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise MetricError(f"frame shape mismatch {a.shape} vs {b.shape}")
        if self.kind == "pixel_mse":
            return float(np.mean((a - b) ** 2))
        return float(np.mean((self.features(a) - self.features(b)) ** 2))


@dataclass(frozen=True)
class Embedding:
    """Bilinear downsample to 16x16, then a fixed seeded random projection to 128 dims."""

    seed: int = 0
    size: int = 16
    dim: int = 128

    def __call__(self, frame) -> np.ndarray:
        x = torch.from_numpy(np.asarray(frame, dtype=np.float64)).permute(2, 0, 1)[None]
        small = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        v = small.reshape(-1).numpy()
        proj = np.random.default_rng(self.seed).standard_normal((self.dim, v.size)) / np.sqrt(v.size)
        return proj @ v


# --- metrics ---------------------------------------------------------------


def _as_clip(clip):
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim == 1:
        clip = clip.reshape(-1, 1, 1, 1)
    return clip


def vidreamsim(out_clip, gt_clip, d=Distance()) -> float:
    """(1/T) sum_{t=1..T} d(out_t, gt_t) for frames 0..T."""
    out, gt = _as_clip(out_clip), _as_clip(gt_clip)
    if out.shape != gt.shape:
        raise MetricError(f"clip shape mismatch {out.shape} vs {gt.shape}")
    T = out.shape[0] - 1
    if T < 1:
        raise MetricError("need at least two frames")
    return sum(d(out[t], gt[t]) for t in range(1, T + 1)) / T


def err_accu(out_clip, d=Distance(), normalizer: str = "printed") -> float:
    """Drift from the first output frame: sum_{t=1..T} d(out_t, out_0) / (T - 1).

    ``normalizer="T"`` divides by T instead.
    """
    out = _as_clip(out_clip)
    T = out.shape[0] - 1
    if normalizer == "printed":
        if T < 2:
            raise MetricError("error accumulation with the 1/(T-1) normalizer needs at least three frames")
        denom = T - 1
    elif normalizer == "T":
        if T < 1:
            raise MetricError("error accumulation needs at least two frames")
        denom = T
    else:
        raise MetricError(f"unknown normalizer {normalizer!r}")
    return sum(d(out[t], out[0]) for t in range(1, T + 1)) / denom


def estimate_flow_block_matching(clip, radius: int = 3, block: int = 4) -> np.ndarray:
    """Integer backward flow per block by SAD search; returns [T, H, W, 3] (dx, dy, valid)."""
    clip = _as_clip(clip)
    T1, H, W = clip.shape[:3]
    Hb, Wb = H // block * block, W // block * block
    flows = np.zeros((T1 - 1, H, W, 3))
    for t in range(T1 - 1):
        a, b = clip[t], clip[t + 1]
        best = np.full((Hb // block, Wb // block), np.inf)
        fx = np.zeros_like(best)
        fy = np.zeros_like(best)
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                # source of q is q - (dx, dy)
                shifted = np.full_like(a, np.nan)
                ys = slice(max(dy, 0), H + min(dy, 0))
                xs = slice(max(dx, 0), W + min(dx, 0))
                yd = slice(max(-dy, 0), H + min(-dy, 0))
                xd = slice(max(-dx, 0), W + min(-dx, 0))
                shifted[ys, xs] = a[yd, xd]
                err = np.abs(b - shifted).sum(-1)[:Hb, :Wb]
                sad = err.reshape(Hb // block, block, Wb // block, block).sum(axis=(1, 3))
                sad = np.where(np.isnan(sad), np.inf, sad + 1e-9 * (dx * dx + dy * dy))
                better = sad < best
                best = np.where(better, sad, best)
                fx = np.where(better, dx, fx)
                fy = np.where(better, dy, fy)
        up = lambda m: np.repeat(np.repeat(m, block, 0), block, 1)
        flows[t, :Hb, :Wb, 0] = up(fx)
        flows[t, :Hb, :Wb, 1] = up(fy)
        flows[t, :Hb, :Wb, 2] = up(np.isfinite(best).astype(float))
    return flows


def temp_con(out_clip, flow) -> float:
    """Mean over pairs of the masked mean |warp(out_t -> t+1) - out_{t+1}|.

    ``flow`` is [T, H, W, 3] with channels (dx, dy, valid), or None (error).
    """
    if flow is None:
        raise MetricError("temporal consistency needs a flow field for every consecutive pair")
    out = _as_clip(out_clip)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape[0] != out.shape[0] - 1 or flow.shape[1:3] != out.shape[1:3]:
        raise MetricError(f"flow shape {flow.shape} does not match clip {out.shape}")
    errs = []
    for t in range(out.shape[0] - 1):
        m = flow[t, ..., 2] > 0.5
        if not m.any():
            continue
        warped = warp_backward(out[t], flow[t])
        errs.append(float(np.abs(warped - out[t + 1])[m].mean()))
    if not errs:
        raise MetricError("flow validity mask is empty for every frame pair")
    return float(np.mean(errs))


def dvs_details(in_clip, out_clip, gt_clip, embed=Embedding()):
    """Return (mean cosine of edit directions, number of skipped degenerate frames)."""
    x, out, gt = _as_clip(in_clip), _as_clip(out_clip), _as_clip(gt_clip)
    if not (x.shape[0] == out.shape[0] == gt.shape[0]):
        raise MetricError("clips must have equal lengths")
    sims, skipped = [], 0
    for t in range(x.shape[0]):
        ex = embed(x[t])
        u, v = embed(out[t]) - ex, embed(gt[t]) - ex
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu < 1e-8 or nv < 1e-8:
            skipped += 1
            continue
        sims.append(float(np.clip(u @ v / (nu * nv), -1.0, 1.0)))
    if not sims:
        raise MetricError("every frame has a degenerate edit direction")
    return float(np.mean(sims)), skipped


def dvs(in_clip, out_clip, gt_clip, embed=Embedding()) -> float:
    return dvs_details(in_clip, out_clip, gt_clip, embed)[0]


# --- corpus evaluation -----------------------------------------------------

METRIC_KEYS = ("vidreamsim", "err_accu", "temp_con", "dvs")


def evaluate_clip(x, out, gt, flow, d=Distance(), embed=Embedding(), normalizer="printed",
                  flow_source="gt") -> dict:
    if flow_source == "block_matching":
        flow = estimate_flow_block_matching(out)
    row = {
        "vidreamsim": vidreamsim(out, gt, d),
        "err_accu": err_accu(out, d, normalizer),
        "temp_con": temp_con(out, flow),
    }
    try:
        row["dvs"], row["dvs_skipped"] = dvs_details(x, out, gt, embed)
    except MetricError:
        row["dvs"], row["dvs_skipped"] = None, int(np.asarray(out).shape[0])
    return row


def aggregate(rows: list[dict]) -> dict:
    agg = {}
    for k in METRIC_KEYS:
        vals = [r[k] for r in rows if r.get(k) is not None]
        agg[k] = float(np.mean(vals)) if vals else None
    agg["n"] = len(rows)
    return agg


def evaluate_corpus(manifest_path, results_dir, split: str = "val", distance: str = "pixel_mse",
                    feature_seed: int = 0, normalizer: str = "printed", flow_source: str = "gt",
                    ids=None) -> dict:
    """Score ``results_dir/<id>.vt`` against every record of ``split``.

    Raises MissingResultsError (carrying a partial report) when any result is absent.
    """
    manifest_path, results_dir = Path(manifest_path), Path(results_dir)
    root = manifest_path.parent
    records = [r for r in tensorio.read_manifest(manifest_path) if r["meta"].get("split") == split]
    if ids is not None:
        wanted = set(ids)
        records = [r for r in records if r["id"] in wanted]
    d = Distance(distance, seed=feature_seed)
    embed = Embedding(seed=feature_seed)
    rows, missing = [], []
    for r in records:
        res = results_dir / f"{r['id']}.vt"
        if not res.is_file():
            missing.append(r["id"])
            continue
        out = tensorio.read_tensor(res)
        x = tensorio.read_tensor(root / r["input_path"])
        gt = tensorio.read_tensor(root / r["target_path"])
        flow = tensorio.read_tensor(root / r["flow_path"])
        row = {"id": r["id"], "task": r["meta"].get("task", "unknown")}
        row.update(evaluate_clip(x, out, gt, flow, d, embed, normalizer, flow_source))
        rows.append(row)
    tasks = sorted({r["task"] for r in rows})
    report = {
        "config": {"split": split, "distance": distance, "feature_seed": feature_seed,
                   "err_accu_normalizer": normalizer, "flow_source": flow_source},
        "counts": {"records": len(records), "evaluated": len(rows), "missing": len(missing)},
        "videos": rows,
        "aggregates": {"overall": aggregate(rows), **{t: aggregate([r for r in rows if r["task"] == t]) for t in tasks}},
        "missing": missing,
    }
    if missing or not records:
        raise MissingResultsError(missing, report)
    return report


def write_report(report: dict, path) -> None:
    tensorio.atomic_write_bytes(path, (json.dumps(report, indent=1, sort_keys=True) + "\n").encode("utf-8"))
