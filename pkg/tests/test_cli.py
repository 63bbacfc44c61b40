import csv
import json

import numpy as np
import pytest

from pixeldefend.attacks import load_batch
from pixeldefend.bench import small_plan
from pixeldefend.cli import main
from pixeldefend.data import load_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "plan.json"
    config.write_text(json.dumps(small_plan().to_dict()))
    assert main(["--config", str(config), "--out", str(root / "data"), "gen-data"]) == 0
    assert main(["train-density", "--config", str(config), "--out", str(root / "models"),
                 "--data", str(root / "data" / "train.ptk")]) == 0
    assert main(["train-classifier", "--config", str(config), "--out", str(root / "models"),
                 "--data", str(root / "data" / "train.ptk")]) == 0
    return root, config


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data_outputs(workspace):
    root, _ = workspace
    train = load_dataset(root / "data" / "train.ptk")
    assert len(train) == small_plan().dataset.train and train.image_shape == (8, 8, 1)
    assert {p.name for p in (root / "data").iterdir()} == {"train.ptk", "validation.ptk", "test.ptk"}


def test_attack_and_purify(workspace, capsys):
    root, config = workspace
    out = root / "adv"
    assert main(["attack", "--config", str(config), "--out", str(out), "--classifier",
                 str(root / "models" / "classifier_normal.ptk"), "--data", str(root / "data" / "test.ptk"),
                 "--method", "fgsm", "--eps", "4", "--limit", "10"]) == 0
    batch = load_batch(out / "attack_fgsm_4.ptk")
    assert len(batch.labels) == 10 and np.abs(batch.perturbed - batch.originals).max() <= 4
    assert main(["purify", "--out", str(out), "--density", str(root / "models" / "density.ptk"),
                 "--data", str(out / "attack_fgsm_4.ptk"), "--eps-defend", "6"]) == 0
    purified = load_dataset(out / "purified.ptk")
    assert np.abs(purified.images - batch.perturbed).max() <= 6
    assert "bits/dim" in capsys.readouterr().out


def test_purify_adaptive_and_baseline(workspace):
    root, _ = workspace
    for extra in (["--adaptive-tau", "1e9"], ["--baseline", "gradient_ascent"]):
        out = root / ("p" + extra[0])
        assert main(["purify", "--out", str(out), "--density", str(root / "models" / "density.ptk"),
                     "--data", str(root / "data" / "validation.ptk"), "--eps-defend", "3"] + extra) == 0
    same = load_dataset(root / "p--adaptive-tau" / "purified.ptk")
    assert np.array_equal(same.images, load_dataset(root / "data" / "validation.ptk").images)


def test_score(workspace):
    root, _ = workspace
    assert main(["score", "--out", str(root / "score"), "--density", str(root / "models" / "density.ptk"),
                 "--data", str(root / "data" / "test.ptk")]) == 0
    rows = read_rows(root / "score" / "scores.csv")
    assert len(rows) == small_plan().dataset.test and float(rows[0]["bpd"]) > 0


def test_detect_on_training_set_is_uniform(workspace):
    root, _ = workspace
    train = str(root / "data" / "train.ptk")
    assert main(["detect", "--out", str(root / "det"), "--density", str(root / "models" / "density.ptk"),
                 "--train", train, "--data", train]) == 0
    p = np.array([float(r["p"]) for r in read_rows(root / "det" / "detection.csv")])
    assert abs(p.mean() - 0.5) <= 0.05


def test_bench_twice_identical(tmp_path, workspace):
    _, config = workspace
    for run in ("run1", "run2"):
        assert main(["bench", "--config", str(config), "--out", str(tmp_path / run)]) == 0
    for name in ("accuracy.csv", "detection.csv", "report.md"):
        assert (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    a, b = (json.loads((tmp_path / r / "report.json").read_text()) for r in ("run1", "run2"))
    for d in (a, b):
        d["provenance"].pop("wall_clock_seconds")
        d["provenance"].pop("stage_seconds")
    assert a == b


def test_seed_flag_changes_data(tmp_path):
    assert main(["gen-data", "--config", "/nonexistent.json"]) == 1
    plan = tmp_path / "p.json"
    plan.write_text(json.dumps({"dataset": {"side": 8, "n_classes": 2, "train": 4, "validation": 2, "test": 2},
                                "calibration_size": 2, "eval_size": 2, "detection_size": 2}))
    assert main(["gen-data", "--config", str(plan), "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(plan), "--seed", "2", "--out", str(tmp_path / "b")]) == 0
    a = load_dataset(tmp_path / "a" / "train.ptk")
    b = load_dataset(tmp_path / "b" / "train.ptk")
    assert not np.array_equal(a.images, b.images)


class TestExitCodes:
    def test_unknown_flag_prints_help(self, capsys):
        assert main(["gen-data", "--bogus"]) == 1
        err = capsys.readouterr().err
        assert "--bogus" in err and "usage:" in err

    def test_missing_subcommand(self):
        assert main([]) == 1

    def test_missing_config_names_path(self, capsys, tmp_path):
        missing = tmp_path / "nowhere" / "plan.json"
        assert main(["bench", "--config", str(missing)]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_invalid_config_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"unknown_key": 1}))
        assert main(["bench", "--config", str(bad), "--out", str(tmp_path)]) == 1

    def test_runtime_failure(self, tmp_path, capsys):
        corrupt = tmp_path / "x.ptk"
        corrupt.write_bytes(b"PTK1\x00garbage")
        assert main(["score", "--density", str(corrupt), "--data", str(corrupt), "--out", str(tmp_path)]) == 2
        assert "score failed" in capsys.readouterr().err

    def test_missing_archive_is_runtime_failure(self, tmp_path):
        assert main(["score", "--density", str(tmp_path / "d.ptk"), "--data", str(tmp_path / "x.ptk"),
                     "--out", str(tmp_path)]) == 2
