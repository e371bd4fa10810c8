#!/usr/bin/env python3
"""End-to-end runs of run_tctr.py on the tiny configuration."""
from pathlib import Path

import pytest

from conftest import tiny_config
from run_tctr import main
from tctr.config import DEFAULTS, RunConfig
from tctr.plots import HAS_MATPLOTLIB
from tctr.runlog import read_records


def build_config_file(tmp_path: Path) -> Path:
    return tiny_config().save(tmp_path / "tiny.cfg")


def run(command, tmp_path, *extra):
    return main([command, "--config", str(build_config_file(tmp_path)), "--out", str(tmp_path / "run"), *extra])


def test_defaults_listing(capsys):
    assert main(["defaults"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == len(DEFAULTS)
    assert any(line.startswith("tctr.C2 = 16") for line in out)


def test_gen_train_eval_infer_render(tmp_path):
    out = tmp_path / "run"
    assert run("gen", tmp_path) == 0
    assert (out / "train.lseq").exists() and (out / "eval.lseq").exists()

    assert run("train", tmp_path) == 0
    assert (out / "model.tckp").exists()
    steps = read_records(out / "run.log", "step")
    assert [int(r["step"]) for r in steps] == [0, 1]
    assert all(float(r["grad_norm"]) > 0 for r in steps)
    assert (out / "loss_curve.png").exists() == HAS_MATPLOTLIB

    assert run("eval", tmp_path) == 0
    evals = read_records(out / "run.log", "eval")
    assert {r["class"] for r in evals} == {"car", "pedestrian"}
    assert (out / "eval_report.txt").exists()
    assert (out / "pr_curve.png").exists() == HAS_MATPLOTLIB

    assert run("infer", tmp_path) == 0
    assert run("render", tmp_path) == 0
    assert (out / "render_000.bmp").exists()

    summaries = read_records(out / "run.log", "run_summary")
    assert len(summaries) == 1
    assert summaries[0]["config_hash"] == RunConfig.load(out / "config.txt").config_hash()
    assert len(read_records(out / "run.log", "config")) == len(DEFAULTS)


def test_train_generates_missing_data(tmp_path):
    assert run("train", tmp_path, "--seed", "4") == 0
    out = tmp_path / "run"
    assert (out / "train.lseq").exists()
    summary = read_records(out / "run.log", "run_summary")[0]
    assert summary["seed"] == "4"
    assert summary["steps"] == "2"


def test_eval_without_checkpoint_fails(tmp_path, capsys):
    assert run("eval", tmp_path) == 1
    assert "Checkpoint not found" in capsys.readouterr().err


def test_unknown_override_fails(tmp_path, capsys):
    assert run("gen", tmp_path, "--set", "tctr.c2=3") == 1
    assert "Unknown config key" in capsys.readouterr().err


def test_render_index_out_of_range(tmp_path):
    assert run("train", tmp_path) == 0
    assert run("render", tmp_path, "--set", "render.sequence=99") == 1


@pytest.mark.slow
def test_gradcheck_command(tmp_path):
    assert run("gradcheck", tmp_path, "--set", "gradcheck.samples_per_param=2") == 0
    groups = read_records(tmp_path / "run" / "run.log", "gradcheck")
    assert {g["group"] for g in groups} >= {"pfn", "backbone", "tctr", "refine", "head"}


if __name__ == "__main__":
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        test_gen_train_eval_infer_render(Path(d))
    print("CLI tests passed.")
