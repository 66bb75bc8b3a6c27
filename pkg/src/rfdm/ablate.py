"""Ablation sweeps: train and evaluate one setting per row on shared data and seeds."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import metrics, tensorio
from .config import RunConfig, training_hash
from .sample import edit_videos
from .synthvid import PromptSpec, build_dataset
from .train import load_model, run_training

log = logging.getLogger(__name__)

AXES = {
    "ar_frames": [(f"K={k}", {"train.K": k}) for k in (0, 1, 3, 5)],
    "conditioning": [("x", {"train.cond_x_only": True}), ("x+prev", {"train.cond_x_only": False})],
    "forcing": [("teacher", {"train.forcing": "teacher"}), ("diffusion", {"train.forcing": "diffusion"})],
    "delta": [(f"delta={d}", {"sampler.delta": d}) for d in (0, 1, 3, 5)],
    "unroll": [("yes", {"train.unroll": True}), ("no", {"train.unroll": False})],
    "formulation": [("frame", {"train.formulation": "frame_prediction"}),
                    ("residual_flow", {"train.formulation": "residual_flow"})],
}
TABLE_KEYS = ("temp_con", "err_accu", "vidreamsim", "dvs")


class UnknownAxisError(ValueError):
    pass


def ensure_dataset(cfg: RunConfig, data_dir) -> Path:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    stamp = data_dir / "generator.json"
    key = json.dumps({"generator": vars(cfg.generator)}, sort_keys=True)
    if manifest.is_file() and stamp.is_file() and stamp.read_text() == key:
        return manifest
    g = cfg.generator
    build_dataset(g.n_clips, data_dir, g.seed, cfg.generator_config())
    stamp.write_text(key)
    return manifest


def ensure_model(cfg: RunConfig, manifest, models_dir) -> Path:
    """Train (or reuse) the checkpoint for ``cfg``; models are keyed by the training hash."""
    cell = Path(models_dir) / training_hash(cfg)[:16]
    final = cell / "final"
    if (final / "state.json").is_file():
        state = json.loads((final / "state.json").read_text())
        if state["step"] == cfg.train.steps:
            return final
    log.info("training %s", cell.name)
    return run_training(manifest, cfg, cell)


def edit_split(ckpt, cfg: RunConfig, manifest, results_dir, split: str, max_clips: int = 0,
               batch: int = 64) -> list[str]:
    """Edit every clip of ``split`` with the checkpoint; writes ``results_dir/<id>.vt``."""
    model, _ = load_model(ckpt)
    scfg = cfg.sampler_config()
    root = Path(manifest).parent
    records = [r for r in tensorio.read_manifest(manifest) if r["meta"]["split"] == split]
    if max_clips:
        records = records[:max_clips]
    sched = cfg.noise_schedule()
    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        clips = [tensorio.read_tensor(root / r["input_path"]) for r in chunk]
        prompts = [PromptSpec.from_list(r["prompt"]) for r in chunk]
        rngs = [np.random.default_rng([scfg.seed, int(r["id"].removeprefix("clip"))]) for r in chunk]
        for r, res in zip(chunk, edit_videos(model, clips, prompts, scfg, rngs, sched)):
            tensorio.write_tensor(Path(results_dir) / f"{r['id']}.vt", res.output)
    return [r["id"] for r in records]


def run_cell(cfg: RunConfig, manifest, out_dir, models_dir) -> dict:
    out_dir = Path(out_dir)
    ckpt = ensure_model(cfg, manifest, models_dir)
    m = cfg.metrics
    ids = edit_split(ckpt, cfg, manifest, out_dir / "results", m.split, m.max_clips)
    report = metrics.evaluate_corpus(manifest, out_dir / "results", m.split, m.distance, m.feature_seed,
                                     m.err_accu_normalizer, m.flow_source, ids=ids)
    metrics.write_report(report, out_dir / "report.json")
    return report


def run_ablation(axis: str, cfg: RunConfig, out_dir, data_dir=None, models_dir=None, seed_offsets=(0,)) -> dict:
    """Run every setting of ``axis``; with several ``seed_offsets`` rows hold seed means."""
    if axis not in AXES:
        raise UnknownAxisError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    out_dir = Path(out_dir)
    data_dir = Path(data_dir) if data_dir else out_dir / "data"
    models_dir = Path(models_dir) if models_dir else out_dir / "models"
    manifest = ensure_dataset(cfg, data_dir)
    rows = []
    for name, overrides in AXES[axis]:
        per_seed = []
        for off in seed_offsets:
            seeded = {"train.seed": cfg.train.seed + off, "model.seed": cfg.model.seed + off,
                      "sampler.seed": cfg.sampler.seed + off}
            cell_cfg = cfg.replace(**{**seeded, **overrides})
            safe = name.replace("=", "_").replace("+", "_")
            rep = run_cell(cell_cfg, manifest, out_dir / "cells" / f"{safe}_seed{off}", models_dir)
            per_seed.append(rep["aggregates"]["overall"])
        row = {"setting": name}
        for k in TABLE_KEYS:
            vals = [a[k] for a in per_seed if a[k] is not None]
            row[k] = float(np.mean(vals)) if vals else None
        row["per_seed"] = per_seed
        rows.append(row)
    table = {"axis": axis, "data_seed": cfg.generator.seed, "seed_offsets": list(seed_offsets),
             "split": cfg.metrics.split, "rows": rows}
    tensorio.atomic_write_bytes(out_dir / f"ablation_{axis}.json",
                                (json.dumps(table, indent=1, sort_keys=True) + "\n").encode())
    tensorio.atomic_write_bytes(out_dir / f"ablation_{axis}.md", format_table(table).encode())
    return table


def format_table(table: dict) -> str:
    lines = [f"# axis: {table['axis']}  (data seed {table['data_seed']}, split {table['split']})", "",
             "| setting | " + " | ".join(TABLE_KEYS) + " |", "|---" * (len(TABLE_KEYS) + 1) + "|"]
    for r in table["rows"]:
        cells = ["-" if r[k] is None else f"{r[k]:.5f}" for k in TABLE_KEYS]
        lines.append(f"| {r['setting']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
