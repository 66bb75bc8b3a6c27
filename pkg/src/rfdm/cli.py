"""Command-line entry point: ``rfdm {gen-data,train,edit,eval,ablate}``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error (missing files, checkpoint
or results), 4 resume refused because the config hash differs.

Every command resolves its config as defaults < ``--config`` file < ``--set``
overrides < dedicated flags, writes the resolved ``config.toml`` and its hash
next to its outputs, and sends timestamped progress to ``<out>/run.log``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli

from . import ablate, metrics, tensorio
from .config import ConfigError, RunConfig, config_hash, dumps, load
from .denoiser import DenoiserError
from .sample import SamplingError, edit_video
from .synthvid import PALETTE, SELECTORS, STYLE_NAMES, InvalidPromptError, Op, PromptSpec, build_dataset
from .train import ResumeMismatchError, TrainingError, load_model, run_training

log = logging.getLogger("rfdm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RESUME = 0, 2, 3, 4


class MissingInputError(OSError):
    pass


# --- helpers ---------------------------------------------------------------


def parse_prompt(text: str) -> PromptSpec:
    """``style:<name>``, ``recolor:<selector>:<palette index>``, ``remove:<selector>`` or ``[op, a0, a1]``."""
    text = text.strip()
    try:
        if text.startswith("["):
            return PromptSpec.from_list(json.loads(text))
        parts = text.split(":")
        if parts[0] == "style" and len(parts) == 2:
            return PromptSpec(Op.GLOBAL_STYLE, STYLE_NAMES.index(parts[1]))
        if parts[0] == "recolor" and len(parts) == 3:
            return PromptSpec(Op.LOCAL_STYLE, SELECTORS.index(parts[1]), int(parts[2]))
        if parts[0] == "remove" and len(parts) == 2:
            return PromptSpec(Op.REMOVE, SELECTORS.index(parts[1]))
    except (ValueError, json.JSONDecodeError, InvalidPromptError) as e:
        raise ConfigError("--prompt", f"cannot parse {text!r}: {e}") from None
    raise ConfigError("--prompt", f"cannot parse {text!r}; expected style:<{'|'.join(STYLE_NAMES)}>, "
                                  f"recolor:<{'|'.join(SELECTORS)}>:<0..{len(PALETTE) - 1}>, "
                                  f"remove:<selector> or a JSON id list")


def _parse_set(item: str):
    key, sep, raw = item.partition("=")
    if not sep or "." not in key:
        raise ConfigError(item, "--set expects section.key=value")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw  # bare strings need no quoting
    return key.strip(), value


def resolve_config(args, flag_overrides: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise MissingInputError(f"config file not found: {path}")
        cfg = load(path)
    overrides = dict(_parse_set(s) for s in getattr(args, "set", None) or [])
    overrides.update({k: v for k, v in flag_overrides.items() if v is not None})
    return cfg.replace(**overrides) if overrides else cfg


def _start_run(out_dir: Path, command: str, cfg: RunConfig) -> None:
    """Stamp the resolved config into ``out_dir`` and attach the sidecar log."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tensorio.atomic_write_bytes(out_dir / "config.toml", dumps(cfg))
    stamp = {"command": command, "config_hash": config_hash(cfg)}
    tensorio.atomic_write_bytes(out_dir / "run.json", (json.dumps(stamp, sort_keys=True) + "\n").encode())
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    log.info("%s config_hash=%s", command, stamp["config_hash"])


def _manifest_path(p) -> Path:
    p = Path(p)
    m = p / "manifest.jsonl" if p.is_dir() else p
    if not m.is_file():
        raise MissingInputError(f"manifest not found: {m}")
    return m


def _checkpoint_path(p) -> Path:
    p = Path(p)
    if not (p / "state.json").is_file() or not (p / "config.toml").is_file():
        raise MissingInputError(f"not a checkpoint directory: {p}")
    return p


# --- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, {"generator.seed": args.seed, "generator.n_clips": args.n})
    out = Path(args.out)
    _start_run(out, "gen-data", cfg)
    g = cfg.generator
    records = build_dataset(g.n_clips, out, g.seed, cfg.generator_config())
    problems = tensorio.validate_manifest(out / "manifest.jsonl")
    if problems:
        raise tensorio.FormatError("; ".join(problems[:5]), 0)
    log.info("wrote %d clips", len(records))
    print(out / "manifest.jsonl")
    return EXIT_OK


def cmd_train(args) -> int:
    base = None
    if args.resume and not args.config:
        base = load(_checkpoint_path(args.resume) / "config.toml")
    cfg = resolve_config(args, {"train.steps": args.steps, "train.seed": args.seed}, base)
    manifest = _manifest_path(args.data)
    resume = _checkpoint_path(args.resume) if args.resume else None
    out = Path(args.out)
    _start_run(out, "train", cfg)
    final = run_training(manifest, cfg, out, resume=resume)
    print(final)
    return EXIT_OK


def cmd_edit(args) -> int:
    ckpt = _checkpoint_path(args.checkpoint)
    model, train_cfg = load_model(ckpt)
    base = load(args.config) if args.config else train_cfg
    cfg = resolve_config(argparse.Namespace(set=args.set), {
        "sampler.delta": args.delta, "sampler.S": args.steps, "sampler.omega_x": args.omega_x,
        "sampler.omega_xp": args.omega_xp, "sampler.seed": args.seed}, base)
    # the network architecture always comes from the checkpoint
    cfg = cfg.replace(**{f"{sec}.{k}": v for sec in ("model", "train", "schedule")
                         for k, v in vars(getattr(train_cfg, sec)).items()})
    out = Path(args.out)
    _start_run(out, "edit", cfg)
    if args.manifest:
        manifest = _manifest_path(args.manifest)
        ids = ablate.edit_split(ckpt, cfg, manifest, out, args.split or cfg.metrics.split, args.max_clips or 0)
        log.info("edited %d clips", len(ids))
        print(out)
        return EXIT_OK
    if not args.input or not args.prompt:
        raise ConfigError("--input", "edit needs --input and --prompt (or --manifest)")
    src = Path(args.input)
    if not src.is_file():
        raise MissingInputError(f"input clip not found: {src}")
    clip = tensorio.read_tensor(src)
    prompt = parse_prompt(args.prompt)
    scfg = cfg.sampler_config()
    res = edit_video(model, clip, prompt, scfg, np.random.default_rng(scfg.seed), cfg.noise_schedule())
    tensorio.write_tensor(out / "output.vt", res.output)
    print(out / "output.vt")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args, {"metrics.split": args.split, "metrics.distance": args.distance,
                                "metrics.flow_source": args.flow_source,
                                "metrics.err_accu_normalizer": args.normalizer})
    manifest = _manifest_path(args.manifest)
    results = Path(args.results)
    if not results.is_dir():
        raise MissingInputError(f"results directory not found: {results}")
    out = Path(args.out)
    _start_run(out, "eval", cfg)
    m = cfg.metrics
    try:
        report = metrics.evaluate_corpus(manifest, results, m.split, m.distance, m.feature_seed,
                                         m.err_accu_normalizer, m.flow_source)
    except metrics.MissingResultsError as e:
        if e.report is not None:
            metrics.write_report(e.report, out / "report.json")
        raise
    metrics.write_report(report, out / "report.json")
    agg = report["aggregates"]["overall"]
    print(" ".join(f"{k}={agg[k]:.6f}" if agg[k] is not None else f"{k}=-" for k in metrics.METRIC_KEYS))
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.axis not in ablate.AXES:
        raise ConfigError("--axis", f"unknown axis {args.axis!r}; choose from {', '.join(ablate.AXES)}")
    cfg = resolve_config(args, {})
    out = Path(args.out)
    _start_run(out, "ablate", cfg)
    table = ablate.run_ablation(args.axis, cfg, out, data_dir=args.data_dir, models_dir=args.models_dir,
                                seed_offsets=tuple(range(args.seeds)))
    print(ablate.format_table(table), end="")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfdm", description="Causal frame-by-frame video editing on synthetic clips.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="TOML run config (defaults for every missing key)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("gen-data", help="generate the synthetic paired-edit dataset")
    common(g, "dataset directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="number of clips")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    common(t, "run directory (loss.jsonl, checkpoints/, final/)")
    t.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("edit", help="edit a clip (or a manifest split) with a trained checkpoint")
    common(e, "output directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", help="input clip (.vt, [T+1,H,W,3] in [0,1])")
    e.add_argument("--prompt", help="style:<name> | recolor:<selector>:<color> | remove:<selector>")
    e.add_argument("--manifest", help="edit every clip of --split instead of a single --input")
    e.add_argument("--split")
    e.add_argument("--max-clips", type=int)
    e.add_argument("--delta", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--omega-x", type=float)
    e.add_argument("--omega-xp", type=float)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="score edited clips against ground truth")
    common(v, "report directory")
    v.add_argument("--manifest", required=True)
    v.add_argument("--results", required=True, help="directory of <id>.vt edited clips")
    v.add_argument("--split")
    v.add_argument("--distance", choices=["pixel_mse", "random_conv_features"])
    v.add_argument("--flow-source", choices=["gt", "block_matching"])
    v.add_argument("--normalizer", choices=["printed", "T"])
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every setting of one ablation axis")
    common(a, "ablation directory")
    a.add_argument("--axis", required=True, help=" | ".join(ablate.AXES))
    a.add_argument("--data-dir")
    a.add_argument("--models-dir", help="shared cache of trained models")
    a.add_argument("--seeds", type=int, default=1, help="number of seed offsets to average")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    if args.verbose:
        root.addHandler(logging.StreamHandler(sys.stderr))
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error [{e.key}]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumeMismatchError as e:
        print(f"resume refused: {e}", file=sys.stderr)
        return EXIT_RESUME
    except (OSError, tensorio.FormatError, metrics.MissingResultsError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (InvalidPromptError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, SamplingError, DenoiserError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    finally:
        for h in list(root.handlers):
            if isinstance(h, logging.FileHandler):
                root.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
