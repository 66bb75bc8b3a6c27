import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from rfdm import tensorio
from rfdm.cli import main, parse_prompt
from rfdm.config import ConfigError, RunConfig, dumps, load
from rfdm.synthvid import Op, PromptSpec

TINY = {
    "generator.H": 16, "generator.W": 16, "generator.T": 3, "generator.n_clips": 8,
    "generator.radius_range": [2.5, 4.0], "generator.max_speed": 0.8, "generator.wobble_max": 1.0,
    "generator.split_ratios": [0.5, 0.5, 0.0],
    "model.hidden": 8, "model.blocks": 1, "model.emb_dim": 8, "model.n_freqs": 2, "model.groups": 4,
    "train.K": 1, "train.batch": 2, "train.grad_accum": 1, "train.steps": 3,
    "sampler.S": 2, "metrics.max_clips": 2,
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_bytes(dumps(RunConfig().replace(**TINY)))
    return path


@pytest.fixture(scope="module")
def dataset(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tiny_config, dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out)]) == 0
    return out / "final"


def _digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.log"}


def test_gen_data_deterministic(tiny_config, tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(tiny_config), "--n", "4", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
    da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert da == db and "manifest.jsonl" in da and "config.toml" in da
    assert tensorio.validate_manifest(tmp_path / "a" / "manifest.jsonl") == []
    assert load(tmp_path / "a" / "config.toml").generator.seed == 7
    assert (tmp_path / "a" / "run.log").read_text()


def test_bad_ratios_exit_2(tmp_path, capsys):
    code = main(["gen-data", "--set", "generator.split_ratios=[0.5, 0.6, 0.1]", "--out", str(tmp_path)])
    assert code == 2
    assert "generator.split_ratios" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--set", "generator.colour=1", "--out", str(tmp_path)]) == 2
    assert "generator.colour" in capsys.readouterr().err


def test_missing_config_file_exit_3(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 3


def test_train_zero_steps_is_init(tiny_config, dataset, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--steps", "0",
                 "--out", str(tmp_path)]) == 0
    from rfdm.train import Trainer
    params, _, state = tensorio.load_checkpoint(tmp_path / "final")
    init = Trainer(load(tmp_path / "config.toml")).model.state_dict()
    assert state["step"] == 0
    assert all(np.array_equal(params[k], v.numpy()) for k, v in init.items())


def test_train_outputs(trained):
    run = trained.parent
    assert len((run / "loss.jsonl").read_text().splitlines()) == 3
    assert json.loads((run / "run.json").read_text())["command"] == "train"


def test_train_resume_mismatch_exit_4(tiny_config, dataset, trained, tmp_path):
    code = main(["train", "--config", str(tiny_config), "--set", "train.lr=0.01", "--data", str(dataset),
                 "--resume", str(trained), "--out", str(tmp_path)])
    assert code == 4


def test_train_missing_data_exit_3(tiny_config, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 3


def test_edit_missing_checkpoint_exit_3(tmp_path):
    assert main(["edit", "--checkpoint", str(tmp_path / "none"), "--input", "x.vt", "--prompt", "style:sepia",
                 "--out", str(tmp_path / "o")]) == 3


def _edit(trained, dataset, out, *extra):
    clip = dataset / "clips" / "clip000000" / "input.vt"
    code = main(["edit", "--checkpoint", str(trained), "--input", str(clip), "--prompt", "style:grayscale",
                 "--out", str(out), "--seed", "5", *extra])
    assert code == 0
    return tensorio.read_tensor(out / "output.vt")


def test_edit_reproducible_and_delta(trained, dataset, tmp_path):
    a = _edit(trained, dataset, tmp_path / "a", "--delta", "1")
    b = _edit(trained, dataset, tmp_path / "b", "--delta", "1")
    assert (tmp_path / "a" / "output.vt").read_bytes() == (tmp_path / "b" / "output.vt").read_bytes()
    c = _edit(trained, dataset, tmp_path / "c", "--delta", "0")
    assert np.array_equal(a[:2], c[:2])
    assert not np.array_equal(a[2:], c[2:])


def test_edit_then_eval(trained, dataset, tmp_path, capsys):
    manifest = dataset / "manifest.jsonl"
    assert main(["edit", "--checkpoint", str(trained), "--manifest", str(manifest), "--split", "val",
                 "--out", str(tmp_path / "res")]) == 0
    assert main(["eval", "--manifest", str(manifest), "--results", str(tmp_path / "res"),
                 "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["counts"]["missing"] == 0 and rep["counts"]["evaluated"] >= 1
    assert "vidreamsim=" in capsys.readouterr().out


def test_eval_missing_results_exit_3(dataset, tmp_path):
    (tmp_path / "empty").mkdir()
    code = main(["eval", "--manifest", str(dataset / "manifest.jsonl"), "--results", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "ev")])
    assert code == 3
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["missing"] and rep["counts"]["evaluated"] == 0


def test_ablate_unknown_axis_exit_2(tmp_path):
    assert main(["ablate", "--axis", "depth", "--out", str(tmp_path)]) == 2


def test_ablate_delta_table(tiny_config, tmp_path, capsys):
    assert main(["ablate", "--axis", "delta", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    table = json.loads((tmp_path / "ablation_delta.json").read_text())
    assert [r["setting"] for r in table["rows"]] == ["delta=0", "delta=1", "delta=3", "delta=5"]
    assert table["data_seed"] == 0
    assert "data seed 0" in (tmp_path / "ablation_delta.md").read_text()
    # one trained model serves every delta row
    assert len(list((tmp_path / "models").iterdir())) == 1
    # rerun one cell standalone through eval and compare its column values
    cell = tmp_path / "cells" / "delta_1_seed0"
    assert main(["eval", "--config", str(tiny_config), "--manifest", str(tmp_path / "data" / "manifest.jsonl"),
                 "--results", str(cell / "results"), "--out", str(tmp_path / "ev")]) in (0, 3)
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    ids = {r["id"]: r for r in rep["videos"]}
    cell_rep = json.loads((cell / "report.json").read_text())
    for row in cell_rep["videos"]:
        assert ids[row["id"]]["err_accu"] == row["err_accu"]
    row = table["rows"][1]
    assert row["err_accu"] == pytest.approx(cell_rep["aggregates"]["overall"]["err_accu"], rel=1e-12)


def test_parse_prompt():
    assert parse_prompt("style:sepia") == PromptSpec(Op.GLOBAL_STYLE, 2)
    assert parse_prompt("recolor:circle:3") == PromptSpec(Op.LOCAL_STYLE, 1, 3)
    assert parse_prompt("remove:all") == PromptSpec(Op.REMOVE, 0)
    assert parse_prompt("[2, 3, null]") == PromptSpec(Op.REMOVE, 3)
    for bad in ("style:neon", "remove", "recolor:circle:9"):
        with pytest.raises(ConfigError):
            parse_prompt(bad)
