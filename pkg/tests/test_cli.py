import json

import numpy as np
import pytest
import yaml

from read_debias.checkpoint import read_checkpoint
from read_debias.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, load_flat_config, main
from read_debias.errors import ConfigError
from read_debias.evaluation import ABLATION_COLUMNS, read_csv_rows
from read_debias.experiments import RunConfig

SMALL = {
    "vocab_size": 80,
    "train_size": 48,
    "dev_size": 16,
    "ood_decorrelated_size": 16,
    "ood_adversarial_size": 16,
    "num_layers": 2,
    "k": 1,
    "model_dim": 8,
    "num_heads": 2,
    "ffn_dim": 16,
    "max_seq_len": 40,
    "learning_rate": 1e-3,
    "batch_size": 16,
    "epochs": 1,
    "seed": 0,
}


def _write(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "run.yaml", SMALL)
    assert main(["generate-data", "--spec", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == EXIT_OK
    return root


class TestConfig:
    def test_flat_keys_map_to_parts(self):
        run = RunConfig.from_flat(SMALL)
        assert run.model.num_ensemble_layers == 1
        assert run.sizes.train == 48
        assert run.spec.vocab_size == run.model.vocab_size == 80
        assert run.train.learning_rate == 1e-3

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_flat({"bogus": 1})

    def test_nested_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_flat_config(_write(tmp_path / "c.yaml", {"model": {"d": 4}}))


class TestEndToEnd:
    def test_generate_is_byte_identical(self, workspace, tmp_path):
        assert main(["generate-data", "--spec", str(workspace / "run.yaml"), "--out", str(tmp_path)]) == EXIT_OK
        for name in ("train", "dev", "ood_decorrelated", "ood_adversarial"):
            assert (tmp_path / f"{name}.jsonl").read_bytes() == (workspace / "data" / f"{name}.jsonl").read_bytes()

    def test_train_outputs(self, workspace):
        summary = json.loads((workspace / "run" / "summary.json").read_text())
        assert set(summary["accuracy"]) == {"dev", "ood_decorrelated", "ood_adversarial"}
        assert read_checkpoint(workspace / "run" / "model.ckpt").model_config.num_layers == 2

    def test_evaluate(self, workspace, capsys, tmp_path):
        args = ["evaluate", "--ckpt", str(workspace / "run" / "model.ckpt"),
                "--data", str(workspace / "data" / "dev.jsonl"), "--out", str(tmp_path / "r.csv"), "--format", "csv"]
        assert main(args) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["num_examples"] == 16
        assert read_csv_rows(tmp_path / "r.csv")[0]["metric"] == "accuracy"

    def test_evaluate_with_label_map(self, workspace, tmp_path):
        label_map = _write(tmp_path / "map.yaml", {0: 0, 1: 1})
        args = ["evaluate", "--ckpt", str(workspace / "run" / "model.ckpt"),
                "--data", str(workspace / "data" / "dev.jsonl"), "--label-map", str(label_map)]
        assert main(args) == EXIT_OK

    def test_attn_stats(self, workspace, capsys):
        args = ["attn-stats", "--ckpt", str(workspace / "run" / "model.ckpt"),
                "--data", str(workspace / "data" / "ood_adversarial.jsonl"), "--layer", "1", "--path", "ensemble"]
        assert main(args) == EXIT_OK
        stats = json.loads(capsys.readouterr().out)
        assert stats["layer"] == 1 and stats["sample_count"] == 16

    def test_ablate(self, workspace, tmp_path):
        out = tmp_path / "abl.csv"
        args = ["ablate", "--config", str(workspace / "run.yaml"), "--k", "1,2", "--seeds", "2",
                "--data", str(workspace / "data"), "--out", str(out)]
        assert main(args) == EXIT_OK
        rows = read_csv_rows(out)
        assert list(rows[0]) == list(ABLATION_COLUMNS)
        assert [int(r["k"]) for r in rows] == [1, 1, 1, 2, 2, 2]


class TestExitCodes:
    def test_usage(self):
        assert main(["train"]) == EXIT_USAGE
        assert main(["no-such-command"]) == EXIT_USAGE

    def test_bad_config_value(self, workspace, tmp_path):
        cfg = _write(tmp_path / "bad.yaml", {**SMALL, "num_heads": 3})
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_ablate_k_too_large(self, workspace):
        assert main(["ablate", "--config", str(workspace / "run.yaml"), "--k", "3", "--seeds", "1"]) == EXIT_USAGE

    def test_missing_data(self, workspace, tmp_path):
        args = ["evaluate", "--ckpt", str(workspace / "run" / "model.ckpt"), "--data", str(tmp_path / "none.jsonl")]
        assert main(args) == EXIT_DATA

    def test_malformed_data(self, workspace, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"tokens_a": [5]}\n')
        args = ["evaluate", "--ckpt", str(workspace / "run" / "model.ckpt"), "--data", str(bad)]
        assert main(args) == EXIT_DATA

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        ckpt.write_bytes((workspace / "run" / "model.ckpt").read_bytes()[:-8])
        args = ["evaluate", "--ckpt", str(ckpt), "--data", str(workspace / "data" / "dev.jsonl")]
        assert main(args) == EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, workspace, tmp_path):
        cfg = _write(tmp_path / "hot.yaml", {**SMALL, "learning_rate": 1e300, "weight_decay": 0.0})
        args = ["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]
        assert main(args) == EXIT_DIVERGED

    def test_bad_log_level(self, workspace, monkeypatch):
        monkeypatch.setenv("READ_LOG_LEVEL", "chatty")
        assert main(["generate-data", "--spec", str(workspace / "run.yaml"), "--out", "x"]) == EXIT_USAGE
