import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from retrocast.cli import main

TINY = {
    "scene": {"h_cells": 24, "w_cells": 24, "feature_dim": 8, "t_history": 4,
              "t_future": 4, "n_agents": 2, "noise_std": 0.0},
    "model": {"n_queries": 4, "embed_dim": 8, "n_hypotheses": 2, "n_modes": 2,
              "n_layers_detector": 1, "n_layers_forecaster": 1, "n_heads": 2,
              "n_offsets": 2},
    "optim": {"steps": 5, "checkpoint_interval": 0},
    "n_train_scenes": 5, "n_eval_scenes": 2,
}


@pytest.fixture()
def tiny_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


class TestGenerate:
    def test_writes_manifest(self, tiny_yaml, tmp_path):
        out = tmp_path / "data"
        res = run_cli("generate", "--config", tiny_yaml, "--split", "eval",
                      "--out", str(out))
        assert res.exit_code == 0
        assert "2 scene records" in res.output
        assert (out / "eval.rcds").exists()

    def test_bad_split_rejected(self, tiny_yaml, tmp_path):
        res = CliRunner().invoke(
            main, ["generate", "--config", tiny_yaml, "--split", "test",
                   "--out", str(tmp_path)])
        assert res.exit_code != 0


class TestTrainEvaluate:
    def test_train_then_evaluate(self, tiny_yaml, tmp_path):
        run_dir = tmp_path / "run"
        res = run_cli("train", "--config", tiny_yaml, "--out", str(run_dir))
        assert res.exit_code == 0
        assert "final loss" in res.output
        ckpt = run_dir / "checkpoint.ckpt"
        assert ckpt.exists()
        assert (run_dir / "config.yaml").exists()
        assert (run_dir / "run_report.json").exists()

        eval_dir = tmp_path / "eval"
        res = run_cli("evaluate", "--config", tiny_yaml,
                      "--checkpoint", str(ckpt), "--out", str(eval_dir))
        assert res.exit_code == 0
        assert "minFDE" in res.output
        metrics = json.loads((eval_dir / "metrics.json").read_text())
        assert "EPA" in metrics

    def test_seed_override_changes_hash(self, tiny_yaml, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_cli("train", "--config", tiny_yaml, "--out", str(a))
        run_cli("train", "--config", tiny_yaml, "--seed", "9", "--out", str(b))
        ca = yaml.safe_load((a / "config.yaml").read_text())
        cb = yaml.safe_load((b / "config.yaml").read_text())
        assert ca["seed"] != cb["seed"]

    def test_missing_checkpoint_errors(self, tiny_yaml, tmp_path):
        res = CliRunner().invoke(
            main, ["evaluate", "--config", tiny_yaml,
                   "--checkpoint", str(tmp_path / "nope.ckpt")])
        assert res.exit_code != 0


class TestAblate:
    def test_past_motion_suite_table(self, tiny_yaml, tmp_path):
        res = run_cli("ablate", "--config", tiny_yaml, "--suite", "past-motion",
                      "--out", str(tmp_path / "abl"))
        assert res.exit_code == 0
        assert "base" in res.output
        assert "constant_velocity" in res.output


class TestHelp:
    def test_subcommands_listed(self):
        res = run_cli("--help")
        for cmd in ("generate", "train", "evaluate", "ablate", "gradcheck"):
            assert cmd in res.output
