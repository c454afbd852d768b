"""Tests for config resolution (file / env / override layering, strict keys)
and the four CLI commands run end-to-end on tiny fixtures."""

import csv
import json
from pathlib import Path

import pytest
import torch
import yaml

from patchadv.cli import main
from patchadv.config import (
    ConfigError,
    DEFAULTS,
    apply_override,
    load_config,
    save_config,
    train_config_from,
)
from patchadv.losses import LossConfig
from patchadv.toy import save_toy_surrogate
from patchadv.training import save_checkpoint

torch.set_num_threads(1)


class TestLoadConfig:
    def test_defaults_without_any_layer(self):
        cfg = load_config(env={})
        assert cfg["train"]["epochs"] == 20
        assert cfg["loss"]["tau"] == 0.07
        assert cfg["attack"]["epsilon"] == 10.0

    def test_defaults_are_copied_not_shared(self):
        cfg = load_config(env={})
        cfg["train"]["epochs"] = 1
        assert DEFAULTS["train"]["epochs"] == 20

    def test_file_layer_merges(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 3}, "loss": {"R": 9}}))
        cfg = load_config(path, env={})
        assert cfg["train"]["epochs"] == 3
        assert cfg["loss"]["R"] == 9
        assert cfg["train"]["batch_size"] == 32  # untouched defaults survive

    def test_missing_file_is_an_error(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml", env={})

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"trainer": {"epochs": 3}}))
        with pytest.raises(ConfigError, match="trainer"):
            load_config(path, env={})

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"train": {"epoch": 3}}))
        with pytest.raises(ConfigError, match="train.epoch"):
            load_config(path, env={})

    def test_env_layer_parses_yaml_values(self):
        cfg = load_config(env={"PATCHADV_TRAIN_EPOCHS": "7",
                               "PATCHADV_LOSS_USE_LPCL": "false"})
        assert cfg["train"]["epochs"] == 7
        assert cfg["loss"]["use_lpcl"] is False

    def test_env_respects_multiword_keys(self):
        cfg = load_config(env={"PATCHADV_TRAIN_BATCH_SIZE": "4"})
        assert cfg["train"]["batch_size"] == 4

    def test_unknown_env_key_rejected(self):
        with pytest.raises(ConfigError, match="PATCHADV_TRAIN_NOPE"):
            load_config(env={"PATCHADV_TRAIN_NOPE": "1"})

    def test_layer_precedence_file_env_override(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 3}}))
        cfg = load_config(path, env={"PATCHADV_TRAIN_EPOCHS": "5"})
        assert cfg["train"]["epochs"] == 5
        cfg = load_config(path, overrides=["train.epochs=9"],
                          env={"PATCHADV_TRAIN_EPOCHS": "5"})
        assert cfg["train"]["epochs"] == 9

    def test_victim_spec_keys_validated(self):
        with pytest.raises(ConfigError, match=r"eval.victims\[0\]"):
            load_config(overrides=["eval.victims=[{identity: x}]"], env={})

    def test_surrogate_spec_keys_validated(self):
        with pytest.raises(ConfigError, match="surrogate.flavor"):
            load_config(overrides=["surrogate.flavor=vanilla"], env={})

    def test_snapshot_round_trip(self, tmp_path):
        cfg = load_config(overrides=["train.epochs=2", "loss.tau=0.5"], env={})
        path = save_config(cfg, tmp_path / "resolved_config.yaml")
        assert load_config(path, env={}) == cfg


class TestApplyOverride:
    def test_yaml_typing(self):
        cfg = load_config(env={})
        apply_override(cfg, "loss.tau=0.5")
        apply_override(cfg, "train.deterministic=false")
        apply_override(cfg, "train.target=[person]")
        assert cfg["loss"]["tau"] == 0.5
        assert cfg["train"]["deterministic"] is False
        assert cfg["train"]["target"] == ["person"]

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_override(load_config(env={}), "train.epochs")

    def test_wrong_depth_rejected(self):
        cfg = load_config(env={})
        with pytest.raises(ConfigError, match="section.key"):
            apply_override(cfg, "epochs=3")
        with pytest.raises(ConfigError, match="section.key"):
            apply_override(cfg, "a.b.c=3")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="train.nope"):
            apply_override(load_config(env={}), "train.nope=1")


class TestTrainConfigFrom:
    def test_maps_sections_to_trainer_fields(self):
        cfg = load_config(overrides=[
            "train.learning_rate=0.002", "train.beta1=0.4", "train.beta2=0.99",
            "attack.epsilon=16", "generator.width=8", "generator.residual_blocks=2",
            "loss.R=5", "train.seed=3",
        ], env={})
        tcfg = train_config_from(cfg)
        assert tcfg.learning_rate == 0.002
        assert tcfg.betas == (0.4, 0.99)
        assert tcfg.epsilon == 16.0
        assert tcfg.generator_width == 8 and tcfg.residual_blocks == 2
        assert isinstance(tcfg.loss, LossConfig)
        assert tcfg.loss.R == 5
        assert tcfg.loss.seed == 3  # patch sampling inherits the train seed


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """Shared on-disk artifacts for CLI runs: data, surrogate, checkpoint."""
    import numpy as np

    from patchadv.generator import PerturbationGenerator
    from patchadv.toy import make_toy_dataset, train_toy_surrogate

    root = tmp_path_factory.mktemp("cli_env")
    train_m, test_m = make_toy_dataset(root / "data", n_train=12, n_test=6, seed=3)
    surrogate = train_toy_surrogate(train_m, epochs=2, batch_size=6, seed=1,
                                    widths=(8, 16, 16, 32))
    weights = save_toy_surrogate(surrogate, root / "surrogate.pt")
    torch.manual_seed(0)
    net = PerturbationGenerator(width=4, residual_blocks=1,
                                mean=surrogate.mean, std=surrogate.std)
    checkpoint = root / "generator.pt"
    save_checkpoint(net, checkpoint, {
        "epoch": 1,
        "surrogate_id": surrogate.id,
        "surrogate_dataset": surrogate.dataset,
        "surrogate_task": surrogate.task,
        "mean": list(surrogate.mean),
        "std": list(surrogate.std),
    })
    return {
        "root": root,
        "train_manifest": root / "data" / "train.jsonl",
        "test_manifest": root / "data" / "test.jsonl",
        "classes": root / "data" / "classes.txt",
        "weights": Path(weights),
        "checkpoint": checkpoint,
        "image": Path(test_m.resolve_path(test_m.entries[0])),
    }


class TestCmdTrain:
    def test_end_to_end_with_overrides(self, cli_env, tmp_path, capsys):
        out_dir = tmp_path / "ckpt"
        code = main([
            "--out", str(out_dir),
            "train",
            f"--data.train_manifest={cli_env['train_manifest']}",
            f"--data.classes={cli_env['classes']}",
            f"--surrogate.weights={cli_env['weights']}",
            "--train.epochs=1", "--train.batch_size=6",
            "--generator.width=4", "--generator.residual_blocks=1",
            "--loss.R=8",
        ])
        captured = capsys.readouterr()
        assert code == 0, captured.err
        assert (out_dir / "generator_final.pt").is_file()
        assert (out_dir / "training_log.csv").is_file()
        assert (out_dir / "resolved_config.yaml").is_file()
        assert "checkpoint:" in captured.out and "mean objective" in captured.out
        sidecar = json.loads((out_dir / "generator_final.pt").with_suffix(".json").read_text())
        assert sidecar["epoch"] == 1  # --train.epochs=1 honored
        resolved = yaml.safe_load((out_dir / "resolved_config.yaml").read_text())
        assert resolved["train"]["epochs"] == 1

    def test_seed_flag_overrides_train_seed(self, cli_env, tmp_path):
        out_dir = tmp_path / "ckpt"
        code = main([
            "--seed", "9", "--out", str(out_dir),
            "train",
            f"--data.train_manifest={cli_env['train_manifest']}",
            f"--surrogate.weights={cli_env['weights']}",
            "--train.epochs=1", "--train.batch_size=6",
            "--generator.width=4", "--generator.residual_blocks=1",
            "--loss.R=8",
        ])
        assert code == 0
        sidecar = json.loads((out_dir / "generator_final.pt").with_suffix(".json").read_text())
        assert sidecar["seed"] == 9

    def test_env_variable_reaches_training(self, cli_env, tmp_path, monkeypatch):
        monkeypatch.setenv("PATCHADV_TRAIN_SEED", "4")
        out_dir = tmp_path / "ckpt"
        code = main([
            "--out", str(out_dir),
            "train",
            f"--data.train_manifest={cli_env['train_manifest']}",
            f"--surrogate.weights={cli_env['weights']}",
            "--train.epochs=1", "--train.batch_size=6",
            "--generator.width=4", "--generator.residual_blocks=1",
            "--loss.R=8",
        ])
        assert code == 0
        sidecar = json.loads((out_dir / "generator_final.pt").with_suffix(".json").read_text())
        assert sidecar["seed"] == 4

    def test_missing_weights_exits_2_naming_key(self, cli_env, capsys):
        code = main([
            "train",
            f"--data.train_manifest={cli_env['train_manifest']}",
        ])
        captured = capsys.readouterr()
        assert code == 2
        assert "surrogate.weights" in captured.err
        assert captured.err.startswith("error:")
        assert len(captured.err.strip().splitlines()) == 1

    def test_unknown_override_exits_2(self, cli_env, capsys):
        code = main(["train", "--train.nope=1"])
        assert code == 2
        assert "train.nope" in capsys.readouterr().err

    def test_unrecognized_bare_flag_exits_2(self, capsys):
        code = main(["train", "--fast"])
        assert code == 2
        assert "--fast" in capsys.readouterr().err


class TestCmdAttack:
    def test_writes_perturbed_pngs_and_delta_csv(self, cli_env, tmp_path, capsys):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        for name in ("a.png", "b.png"):
            (in_dir / name).write_bytes(cli_env["image"].read_bytes())
        (in_dir / "broken.png").write_bytes(b"not an image")
        out_dir = tmp_path / "out"
        code = main([
            "attack", str(in_dir), str(out_dir),
            f"--attack.checkpoint={cli_env['checkpoint']}",
            "--attack.epsilon=10",
        ])
        captured = capsys.readouterr()
        assert code == 0
        assert "skipping" in captured.err and "broken.png" in captured.err
        assert (out_dir / "a.png").is_file() and (out_dir / "b.png").is_file()
        assert (out_dir / "resolved_config.yaml").is_file()
        with open(out_dir / "deltas.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["image"] for r in rows] == ["a.png", "b.png"]
        for row in rows:
            assert 0.0 <= float(row["max_delta_255"]) <= 10.0 + 1e-5

    def test_zero_budget_reports_zero_delta(self, cli_env, tmp_path):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        (in_dir / "a.png").write_bytes(cli_env["image"].read_bytes())
        out_dir = tmp_path / "out"
        code = main([
            "attack", str(in_dir), str(out_dir),
            f"--attack.checkpoint={cli_env['checkpoint']}",
            "--attack.epsilon=0",
        ])
        assert code == 0
        with open(out_dir / "deltas.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["max_delta_255"]) == 0.0

    def test_empty_directory_yields_header_only_csv(self, cli_env, tmp_path, capsys):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        out_dir = tmp_path / "out"
        code = main([
            "attack", str(in_dir), str(out_dir),
            f"--attack.checkpoint={cli_env['checkpoint']}",
        ])
        assert code == 0
        assert "perturbed 0 image(s)" in capsys.readouterr().out
        lines = (out_dir / "deltas.csv").read_text().strip().splitlines()
        assert lines == ["image,max_delta_255"]

    def test_missing_input_dir_exits_2(self, cli_env, tmp_path, capsys):
        code = main([
            "attack", str(tmp_path / "missing"), str(tmp_path / "out"),
            f"--attack.checkpoint={cli_env['checkpoint']}",
        ])
        assert code == 2
        assert "input directory" in capsys.readouterr().err

    def test_missing_checkpoint_key_exits_2(self, tmp_path, capsys):
        (tmp_path / "in").mkdir()
        code = main(["attack", str(tmp_path / "in"), str(tmp_path / "out")])
        assert code == 2
        assert "attack.checkpoint" in capsys.readouterr().err


class TestCmdEval:
    def victims_yaml(self, cli_env):
        return yaml.safe_dump([{"weights": str(cli_env["weights"])}])

    def test_report_files_and_exit_code(self, cli_env, tmp_path, capsys):
        report_dir = tmp_path / "reports"
        code = main([
            "--out", str(report_dir),
            "eval",
            f"--attack.checkpoint={cli_env['checkpoint']}",
            f"--eval.victims={self.victims_yaml(cli_env)}",
            f"--eval.manifests={{toy-shapes: {cli_env['test_manifest']}}}",
            "--eval.batch_size=3",
        ])
        captured = capsys.readouterr()
        assert code == 0, captured.err
        assert (report_dir / "report.csv").is_file()
        assert (report_dir / "report.txt").is_file()
        assert (report_dir / "resolved_config.yaml").is_file()
        assert "mean setting 1" in captured.out
        with open(report_dir / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["victim"] == "toy-smallcnn"
        assert rows[0]["setting"] == "1"

    def test_unloadable_victims_exit_2(self, cli_env, tmp_path, capsys):
        code = main([
            "--out", str(tmp_path / "reports"),
            "eval",
            f"--attack.checkpoint={cli_env['checkpoint']}",
            "--eval.victims=[{id: ghost, weights: /nonexistent.pt}]",
        ])
        captured = capsys.readouterr()
        assert code == 2
        assert "ghost" in captured.err

    def test_missing_victims_key_exits_2(self, cli_env, capsys):
        code = main(["eval", f"--attack.checkpoint={cli_env['checkpoint']}"])
        assert code == 2
        assert "eval.victims" in capsys.readouterr().err


class TestCmdVisualize:
    def test_writes_grid_and_snapshot(self, cli_env, tmp_path, capsys):
        out = tmp_path / "grid.png"
        code = main([
            "--out", str(out),
            "visualize", str(cli_env["image"]),
            f"--attack.checkpoint={cli_env['checkpoint']}",
            f"--surrogate.weights={cli_env['weights']}",
        ])
        captured = capsys.readouterr()
        assert code == 0, captured.err
        assert out.is_file()
        assert (tmp_path / "grid_resolved_config.yaml").is_file()
        assert "grid written" in captured.out

    def test_cam_class_by_name(self, cli_env, tmp_path):
        out = tmp_path / "grid.png"
        code = main([
            "--out", str(out),
            "visualize", str(cli_env["image"]),
            f"--attack.checkpoint={cli_env['checkpoint']}",
            f"--surrogate.weights={cli_env['weights']}",
            "--visualize.cam_class=circle",
        ])
        assert code == 0 and out.is_file()

    def test_unknown_cam_class_exits_2(self, cli_env, tmp_path, capsys):
        code = main([
            "--out", str(tmp_path / "grid.png"),
            "visualize", str(cli_env["image"]),
            f"--attack.checkpoint={cli_env['checkpoint']}",
            f"--surrogate.weights={cli_env['weights']}",
            "--visualize.cam_class=starfish",
        ])
        assert code == 2
        assert "starfish" in capsys.readouterr().err

    def test_runtime_failure_exits_1(self, cli_env, tmp_path, capsys):
        code = main([
            "visualize", str(tmp_path / "missing.png"),
            f"--attack.checkpoint={cli_env['checkpoint']}",
            f"--surrogate.weights={cli_env['weights']}",
        ])
        captured = capsys.readouterr()
        assert code == 1
        assert captured.err.startswith("error:")
