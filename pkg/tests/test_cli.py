import csv
import json

import pytest

from sparsest import cli
from sparsest.autodiff import TrainingError
from sparsest.cli import RunConfig, build_parser, main, read_config_file

TINY = ["--size", "8", "--blob-min", "2", "--blob-max", "3", "--length", "8", "--n-train", "4",
        "--n-val", "2", "--n-test", "2", "--hidden", "3,3", "--epochs", "1", "--lr", "3e-3",
        "--train-steps", "4", "--warmup", "4", "--horizon", "4"]


def run(*args):
    return main([str(a) for a in args])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    assert run("generate", "--out-dir", d, *TINY) == 0
    return d


class TestConfig:
    def test_file_then_flags(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\nlr = 0.5   # trailing\nw_mse = 0.25\n\nhead_bias = false\n")
        values = read_config_file(cfg_file)
        assert values == {"lr": 0.5, "w_mse": 0.25, "head_bias": False}

    def test_unknown_key(self, tmp_path, capsys):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("learning_rate = 1\n")
        assert run("eval", "--config", cfg_file) == 1
        assert "error_code=1" in capsys.readouterr().err

    def test_bad_flag(self, capsys):
        assert run("train", "--no-such-flag", "1") == 1
        assert "error_code=1" in capsys.readouterr().err

    def test_bad_value(self, capsys):
        assert run("train", "--w-mse", "2") == 1
        assert "error_code=1" in capsys.readouterr().err

    def test_bad_command(self):
        assert run("fly") == 1

    def test_every_field_has_a_flag(self):
        opts = {a.dest for a in build_parser()._actions}
        assert {f for f in RunConfig.__dataclass_fields__} <= opts


class TestCommands:
    def test_generate_is_reproducible(self, tmp_path, data_dir):
        other = tmp_path / "again"
        assert run("generate", "--out-dir", other, *TINY) == 0
        for name in ("train.sstd", "val.sstd", "test.sstd"):
            assert (data_dir / name).read_bytes() == (other / name).read_bytes()
        meta = json.loads((data_dir / "dataset.json").read_text())
        assert meta["config"]["size"] == 8

    def test_train_eval_flops(self, tmp_path, data_dir):
        out = tmp_path / "run"
        assert run("train", "--data-dir", data_dir, "--out-dir", out, *TINY) == 0
        assert (out / "model.sstm").exists()
        log_lines = (out / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 2
        assert run("eval", "--data-dir", data_dir, "--out-dir", out, *TINY) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert {"mse", "ar", "flops_dense", "flops_sparse", "config"} <= set(metrics)
        assert metrics["config"]["w_mse"] == 1.0
        assert run("flops", "--data-dir", data_dir, "--out-dir", out, *TINY) == 0
        table = rows(out / "flops.csv")
        assert len(table) == 2 and {"unit", "d_x", "d_h", "flop_dense", "flop_sparse", "ar"} <= set(table[0])

    def test_checkpoints_are_reproducible(self, tmp_path, data_dir):
        for name in ("a", "b"):
            assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path / name, "--w-mse", "0.5",
                       *TINY) == 0
        assert (tmp_path / "a" / "model.sstm").read_bytes() == (tmp_path / "b" / "model.sstm").read_bytes()

    def test_pareto_and_front(self, tmp_path, data_dir):
        out = tmp_path / "p"
        assert run("pareto", "--data-dir", data_dir, "--out-dir", out, *TINY, "--gp-iterations", "20") == 0
        records = rows(out / "pareto_records.csv")
        assert [float(r["w_mse"]) for r in records] == [0.1, 0.25, 0.5, 0.75, 0.9, 1.0]
        assert len(rows(out / "gp_curve.csv")) == 101
        assert run("front-export", "--out-dir", out) == 0
        front = rows(out / "front.csv")
        assert 1 <= len(front) <= 6
        assert all(r["dominated"] == "False" for r in front)

    def test_anomaly(self, tmp_path):
        d = tmp_path / "cyc"
        common = ["--dataset", "cycles", "--length", "30", "--n-train", "1", "--n-val", "1",
                  "--n-test", "2", "--injectors", "stall:12:16", "--hidden", "2", "--epochs", "1",
                  "--window", "11", "--stride", "5", "--task", "reconstruct"]
        assert run("generate", "--out-dir", d, *common) == 0
        assert run("train", "--data-dir", d, "--out-dir", d, *common) == 0
        assert run("anomaly", "--data-dir", d, "--out-dir", d, *common) == 0
        scores = rows(d / "scores.csv")
        # windows start every 5 frames: 0, 5, 10, 15 in each of the 2 sequences
        assert len(scores) == 2 * 4
        assert [int(r["frame"]) for r in scores[:4]] == [5, 10, 15, 20]
        assert rows(d / "roc.csv")[0].keys() == {"threshold", "fpr", "tpr"}
        result = json.loads((d / "anomaly.json").read_text())
        assert 0.0 <= result["auc"] <= 1.0 and "config" in result


class TestErrors:
    def test_missing_data(self, tmp_path, capsys):
        assert run("train", "--data-dir", tmp_path / "nothing", "--out-dir", tmp_path) == 2
        assert "error_code=2" in capsys.readouterr().err

    def test_corrupt_dataset(self, tmp_path, data_dir, capsys):
        (data_dir / "train.sstd").write_bytes(b"JUNK" + bytes(40))
        assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, *TINY) == 2
        assert "error_code=2" in capsys.readouterr().err

    def test_labels_required_for_anomaly(self, tmp_path, data_dir, capsys):
        assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, *TINY) == 0
        assert run("anomaly", "--data-dir", data_dir, "--out-dir", tmp_path, *TINY) == 2

    def test_numerical_failure(self, tmp_path, data_dir, capsys, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingError("non-finite loss at epoch 1")

        monkeypatch.setattr(cli, "train_prediction", diverge)
        assert run("train", "--data-dir", data_dir, "--out-dir", tmp_path, *TINY) == 3
        assert "error_code=3" in capsys.readouterr().err
