"""Command-line workflows on miniature datasets."""

import filecmp
from pathlib import Path

import numpy as np
import pytest

from segdiscover.cli import ABLATION_GRID, PERCENTILE_SWEEP, main

FAST = [
    "train.epochs=1",
    "train.batch_size=2",
    "model.D=8",
    "model.hidden=16",
    "model.k=4",
    "model.heads=2",
    "model.overcluster_factor=2",
    "queue.capacity=32",
    "queue.sample_per_class=4",
    "offline.pretrain_epochs=1",
    "offline.finetune_epochs=1",
]


def gen_tiny(out, seed=1):
    code = main([
        "gen-data", "--scenes", "4", "--points", "40", "--seed", str(seed),
        "--out", str(out), "data.val_scenes=2",
    ])
    assert code == 0
    return out


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file()
    }


class TestGenData:
    def test_writes_expected_tree(self, tmp_path):
        out = gen_tiny(tmp_path / "d")
        assert (out / "train" / "scans").is_dir()
        assert (out / "val" / "labels").is_dir()
        assert (out / "classes.txt").exists()
        assert (out / "split.txt").exists()
        assert (out / "config.resolved").exists()
        assert len(list((out / "train" / "scans").glob("*.bin"))) == 4

    def test_same_seed_identical_trees(self, tmp_path):
        a = gen_tiny(tmp_path / "a", seed=1)
        b = gen_tiny(tmp_path / "b", seed=1)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert set(ta) == set(tb)
        assert all(ta[k] == tb[k] for k in ta)

    def test_split_file_contents(self, tmp_path):
        out = gen_tiny(tmp_path / "d")
        text = (out / "split.txt").read_text()
        assert "dataset=synthetic" in text
        assert "novel=mast,crown" in text


class TestTrainEval:
    def test_train_writes_artifacts(self, tmp_path):
        data = gen_tiny(tmp_path / "d")
        out = tmp_path / "run"
        code = main(["train", "--data", str(data), "--out", str(out), "--seed", "0", *FAST])
        assert code == 0
        assert (out / "checkpoint.ckpt").exists()
        metrics = (out / "metrics.tsv").read_text().strip().splitlines()
        assert metrics[0].split("\t") == [
            "epoch", "loss", "lr", "eps", "novel_mIoU", "base_mIoU", "all_mIoU",
        ]
        assert len(metrics) == 2

    def test_rerun_from_resolved_config_is_bitwise_identical(self, tmp_path):
        data = gen_tiny(tmp_path / "d")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--data", str(data), "--out", str(out1), "--seed", "3", *FAST]) == 0
        assert main([
            "train", "--data", str(data), "--out", str(out2),
            "--config", str(out1 / "config.resolved"),
        ]) == 0
        assert filecmp.cmp(out1 / "metrics.tsv", out2 / "metrics.tsv", shallow=False)
        assert filecmp.cmp(out1 / "checkpoint.ckpt", out2 / "checkpoint.ckpt", shallow=False)
        assert filecmp.cmp(out1 / "config.resolved", out2 / "config.resolved", shallow=False)

    def test_eval_round_trip(self, tmp_path):
        data = gen_tiny(tmp_path / "d")
        run = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(run), "--seed", "0", *FAST]) == 0
        out = tmp_path / "eval"
        code = main([
            "eval", "--data", str(data), "--checkpoint", str(run / "checkpoint.ckpt"),
            "--out", str(out), *FAST,
        ])
        assert code == 0
        report = (out / "report.tsv").read_text().strip().splitlines()
        assert len(report) == 5 + 3  # per-class rows plus aggregates
        assert report[-1].startswith("All mIoU")


class TestBaselineCommand:
    def test_baseline_writes_artifacts(self, tmp_path):
        data = gen_tiny(tmp_path / "d")
        out = tmp_path / "bl"
        code = main([
            "baseline", "--data", str(data), "--out", str(out), "--seed", "0", *FAST,
        ])
        assert code == 0
        assert (out / "baseline.ckpt").exists()
        assert (out / "report.tsv").exists()
        assert list((out / "pseudo").glob("*.plabel"))


class TestAblate:
    def test_grid_names_and_sweep_values(self, tmp_path):
        assert list(ABLATION_GRID) == ["P", "OC", "Q", "NP", "NP+", "NP++", "Full"]
        assert PERCENTILE_SWEEP == (0.1, 0.3, 0.5, 0.7, 0.9)
        data = gen_tiny(tmp_path / "d")
        out = tmp_path / "ab"
        code = main(["ablate", "--data", str(data), "--out", str(out), "--seed", "0", *FAST])
        assert code == 0
        grid = (out / "ablation.tsv").read_text().strip().splitlines()
        assert [line.split("\t")[0] for line in grid[1:]] == list(ABLATION_GRID)
        sweep = (out / "sweep.tsv").read_text().strip().splitlines()
        assert [line.split("\t")[0] for line in sweep[1:]] == ["0.1", "0.3", "0.5", "0.7", "0.9"]


class TestErrors:
    def test_unknown_flag_exits_two(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus", "x"])
        assert exc.value.code == 2

    def test_unknown_config_key_reports_error(self, tmp_path):
        data = gen_tiny(tmp_path / "d")
        code = main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "no.such=1"])
        assert code == 1

    def test_missing_data_dir_reports_error(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "r")])
        assert code == 1
