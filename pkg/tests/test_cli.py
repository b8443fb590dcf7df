import numpy as np
import pytest

from emsoftmax.cli import (
    ConfigError,
    RunConfig,
    config_to_text,
    load_datasets,
    main,
    parse_config_text,
)

QUICK = """
dataset = synthetic
synth_classes = 4
synth_samples = 30
synth_eval_samples = 15
synth_dim = 8
synth_noise = 1.0
hidden_dims = 12
feature_dim = 8
heads = 2
lambda = 0.1
margin = 0.5
base_lr = 0.05
max_iters = 120
batch_size = 30
lr_drop_iters = 80
seed = 4
log_every = 40
eval_every = 80
"""


def write_quick(tmp_path, name="run.cfg", **overrides):
    base = {
        "dataset": "synthetic", "synth_classes": 4, "synth_samples": 30,
        "synth_eval_samples": 15, "synth_dim": 8, "synth_noise": 1.0,
        "hidden_dims": 12, "feature_dim": 8, "heads": 2, "lambda": 0.1,
        "margin": 0.5, "base_lr": 0.05, "max_iters": 120, "batch_size": 30,
        "lr_drop_iters": 80, "seed": 4, "log_every": 40, "eval_every": 80,
    }
    base.update(overrides)
    path = tmp_path / name
    path.write_text("\n".join(f"{k} = {v}" for k, v in base.items()) + "\n")
    return path


class TestConfigFormat:
    def test_round_trip_identity(self):
        cfg = parse_config_text(QUICK)
        assert parse_config_text(config_to_text(cfg)) == cfg

    def test_defaults_round_trip(self):
        assert parse_config_text(config_to_text(RunConfig())) == RunConfig()

    def test_lambda_key_maps_to_diversity_weight(self):
        cfg = parse_config_text("lambda = 0.25")
        assert cfg.diversity_weight == 0.25
        assert "lambda = 0.25" in config_to_text(cfg)

    def test_comments_and_blank_lines_ignored(self):
        cfg = parse_config_text("# comment\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_unknown_key_rejected_with_line_number(self):
        with pytest.raises(ConfigError, match="line 2.*unknown key"):
            parse_config_text("seed = 1\nbogus = 2")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("max_iters = soon")
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("mean_subtract = maybe")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just some words")

    def test_empty_tuple_values(self):
        cfg = parse_config_text("hidden_dims =\nlr_drop_iters =")
        assert cfg.hidden_dims == ()
        assert cfg.lr_drop_iters == ()
        assert parse_config_text(config_to_text(cfg)) == cfg


class TestDatasetResolution:
    def test_synthetic_split_sizes(self):
        cfg = parse_config_text(QUICK)
        train, evald, mean = load_datasets(cfg)
        assert len(train) == 4 * 30 and len(evald) == 4 * 15
        assert train.dim == 8 and mean is None

    def test_train_and_eval_are_disjoint(self):
        cfg = parse_config_text(QUICK)
        train, evald, _ = load_datasets(cfg)
        joined = np.vstack([train.features, evald.features])
        assert len(np.unique(joined, axis=0)) == len(joined)

    def test_limit_train(self):
        cfg = parse_config_text(QUICK + "limit_train = 17\n")
        train, _, _ = load_datasets(cfg)
        assert len(train) == 17

    def test_mean_subtract(self):
        cfg = parse_config_text(QUICK + "mean_subtract = true\n")
        train, _, mean = load_datasets(cfg)
        assert mean is not None
        np.testing.assert_allclose(train.features.mean(axis=0), np.zeros(8), atol=1e-12)

    def test_mnist_requires_directory(self):
        with pytest.raises(ConfigError, match="mnist_dir"):
            load_datasets(parse_config_text("dataset = mnist"))

    def test_missing_mnist_files_named(self, tmp_path):
        cfg = parse_config_text(f"dataset = mnist\nmnist_dir = {tmp_path}")
        with pytest.raises(ConfigError, match="train-images"):
            load_datasets(cfg)

    def test_unknown_dataset_kind(self):
        with pytest.raises(ConfigError, match="dataset"):
            load_datasets(parse_config_text("dataset = cifar"))


class TestTrainCommand:
    def test_writes_artifacts_and_prints_accuracy(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "final eval accuracy:" in printed
        for name in ("report.csv", "model.ckpt", "resolved.cfg"):
            assert (out / name).exists()
        report = (out / "report.csv").read_text()
        assert report.startswith("iter,lr,total_loss,cls_term,div_term,train_acc,eval_acc,seconds")
        # diversity term is live for a two-head run
        assert float(report.strip().split("\n")[1].split(",")[4]) > 0.0

    def test_resolved_config_round_trips(self, tmp_path):
        cfg_path = write_quick(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg_path), "--out", str(out), "--seed", "11"])
        resolved = parse_config_text((out / "resolved.cfg").read_text())
        assert resolved.seed == 11
        assert resolved.out_dir == str(out)
        assert parse_config_text(config_to_text(resolved)) == resolved

    def test_missing_config_exits_one(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 1
        assert "error" in capsys.readouterr().err

    def test_invalid_config_value_exits_one(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path, momentum="1.5")
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x")]) == 1

    def test_divergent_run_exits_two_and_keeps_partial_report(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path, base_lr="10000.0", log_every="1")
        out = tmp_path / "boom"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 2
        assert "diverged" in capsys.readouterr().err
        assert (out / "report.csv").exists()


class TestEvalCommand:
    def test_matches_training_eval(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg_path), "--out", str(out)])
        train_acc = capsys.readouterr().out.strip().split()[-1]
        code = main(
            ["eval", "--checkpoint", str(out / "model.ckpt"), "--config", str(cfg_path)]
        )
        printed = capsys.readouterr().out
        assert code == 0
        assert f"top1 accuracy: {train_acc}" in printed

    def test_top5_reported_and_at_least_top1(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path, synth_classes="6")
        out = tmp_path / "run"
        main(["train", "--config", str(cfg_path), "--out", str(out)])
        capsys.readouterr()
        main(["eval", "--checkpoint", str(out / "model.ckpt"), "--config", str(cfg_path)])
        lines = capsys.readouterr().out.strip().split("\n")
        top1 = float(lines[0].split(":")[1])
        top5 = float(lines[1].split(":")[1])
        assert top5 >= top1

    def test_dim_mismatch_exits_one(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg_path), "--out", str(out)])
        capsys.readouterr()
        other = write_quick(tmp_path, name="other.cfg", synth_dim=9)
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--config", str(other)]) == 1
        assert "dim" in capsys.readouterr().err

    def test_missing_checkpoint_exits_one(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path)
        assert main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"), "--config", str(cfg_path)]) == 1


class TestGradcheckCommand:
    def test_passes_and_prints_grid(self, capsys):
        assert main(["gradcheck", "--instances", "2"]) == 0
        out = capsys.readouterr().out
        assert out.count("[ok]") == 13  # 12 grid cells + overall line
        assert "FAIL" not in out

    def test_corrupted_gradient_detected(self, capsys):
        assert main(["gradcheck", "--instances", "1", "--corrupt", "head0"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestSweepCommand:
    def run_sweep(self, tmp_path, param, values, seeds="4,5"):
        cfg_path = write_quick(tmp_path, max_iters="80")
        out = tmp_path / "sweep"
        code = main(
            [
                "sweep", "--config", str(cfg_path), "--out", str(out),
                "--sweep-param", param, "--sweep-values", values,
                "--sweep-seeds", seeds,
            ]
        )
        return code, out

    def test_csv_layout(self, tmp_path, capsys):
        code, out = self.run_sweep(tmp_path, "lambda", "0,0.1")
        assert code == 0
        lines = (out / "sweep.csv").read_text().strip().split("\n")
        assert lines[0] == "value,seed,accuracy,div_term"
        # 2 values x (2 seeds + 1 mean row)
        assert len(lines) == 1 + 2 * 3
        assert lines[3].startswith("0,mean,")
        assert (out / "lambda_0.1" / "seed_5" / "model.ckpt").exists()

    def test_single_head_row_matches_direct_run(self, tmp_path, capsys):
        code, out = self.run_sweep(tmp_path, "v", "1", seeds="4")
        assert code == 0
        row = (out / "sweep.csv").read_text().strip().split("\n")[1]
        sweep_acc = row.split(",")[2]

        cfg_path = write_quick(tmp_path, max_iters="80", heads="1", seed="4")
        direct_out = tmp_path / "direct"
        capsys.readouterr()
        main(["train", "--config", str(cfg_path), "--out", str(direct_out)])
        direct_acc = capsys.readouterr().out.strip().split()[-1]
        assert sweep_acc == direct_acc

    def test_zero_margin_row_matches_plain_softmax_run(self, tmp_path, capsys):
        cfg_path = write_quick(tmp_path, max_iters="80", heads="1", **{"lambda": "0.0"})
        out = tmp_path / "msweep"
        assert main(
            [
                "sweep", "--config", str(cfg_path), "--out", str(out),
                "--sweep-param", "m", "--sweep-values", "0", "--sweep-seeds", "4",
            ]
        ) == 0
        row = (out / "sweep.csv").read_text().strip().split("\n")[1]
        sweep_acc = row.split(",")[2]

        plain = write_quick(tmp_path, max_iters="80", heads="1", margin="0.0",
                            seed="4", **{"lambda": "0.0"})
        capsys.readouterr()
        main(["train", "--config", str(plain), "--out", str(tmp_path / "plain")])
        assert sweep_acc == capsys.readouterr().out.strip().split()[-1]

    def test_bad_sweep_values_exit_one(self, tmp_path, capsys):
        code, _ = self.run_sweep(tmp_path, "lambda", "0,huh")
        assert code == 1

    def test_unknown_sweep_param_exits_one(self, tmp_path):
        cfg_path = write_quick(tmp_path)
        with pytest.raises(SystemExit) as exc:
            main(
                [
                    "sweep", "--config", str(cfg_path), "--out", str(tmp_path / "s"),
                    "--sweep-param", "momentum", "--sweep-values", "0.9",
                ]
            )
        assert exc.value.code == 1
