import csv
import re

import numpy as np
import pytest

from vtpnet import cli
from vtpnet.config import load_config, parse_config_text, preset_path
from vtpnet.io.checkpoint import load_checkpoint
from vtpnet.nn import Tensor
from vtpnet.nn import functional as F
from vtpnet.training.ablation import AGG_LETTERS, variants_for

# small enough that a run takes a few seconds
TINY = """\
task = {task}
preset = custom
blocks.0.c_out = 16
blocks.0.R = 4
blocks.0.M = 16
blocks.0.r = 0.6
blocks.0.K = 8
blocks.1.c_out = 32
blocks.1.R = 8
blocks.1.M = 32
blocks.1.r = 0.3
blocks.1.K = 4
head_dims = 32, 16
mlp_dims = 32, 64
data.shapes = sphere, cube
data.points_per_cloud = 64
data.num_train = 8
data.num_eval = 4
train.epochs = 2
train.batch_size = 4
output_dir = {out}
"""


def tiny_config(tmp_path, task="cls", **extra):
    text = TINY.format(task=task, out=tmp_path / "run")
    text += "".join(f"{k} = {v}\n" for k, v in extra.items())
    path = tmp_path / f"{task}.cfg"
    path.write_text(text)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestTrain:
    def test_artifacts(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg), "-q"]) == 0
        run = tmp_path / "run"
        assert sorted(p.name for p in run.iterdir()) == ["config.resolved.cfg", "final.ckpt", "metrics.csv"]
        rows = read_csv(run / "metrics.csv")
        assert [r["epoch"] for r in rows] == ["1", "2"]
        assert set(rows[0]) == {"epoch", "loss", "OA", "mAcc", "mIoU"}
        resolved = parse_config_text((run / "config.resolved.cfg").read_text())
        assert resolved == load_config(cfg).resolved()
        assert load_checkpoint(run / "final.ckpt").meta["epoch"] == 2
        assert "trained 2 epochs" in capsys.readouterr().out

    def test_deterministic_rerun_identical_metrics(self, tmp_path):
        cfg = tiny_config(tmp_path)
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["train", "--config", str(cfg), "--output-dir", str(out),
                             "--deterministic", "-q"]) == 0
            tensors = load_checkpoint(out / "final.ckpt").tensors
            blobs.append(((out / "metrics.csv").read_bytes(), {k: v.tobytes() for k, v in tensors.items()}))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]

    def test_eval_matches_training_metrics(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, task="seg", **{"train.metrics_split": "train"})
        assert cli.main(["train", "--config", str(cfg), "-q"]) == 0
        last = read_csv(tmp_path / "run" / "metrics.csv")[-1]
        out = tmp_path / "eval.csv"
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                         "--split", "train", "--output", str(out), "-q"]) == 0
        row = read_csv(out)[0]
        # the loss column of metrics.csv is the epoch's training loss; the rest are eval-mode metrics
        for key in ("OA", "mAcc", "mIoU"):
            assert row[key] == last[key], key

    def test_epochs_override_zero(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg), "--epochs", "0", "-q"]) == 0
        assert read_csv(tmp_path / "run" / "metrics.csv") == []
        assert (tmp_path / "run" / "final.ckpt").is_file()

    def test_missing_config(self, tmp_path):
        assert cli.main(["train"]) == 2
        assert cli.main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("task = cls\ntrain.lr = fast\n")
        assert cli.main(["train", "--config", str(path)]) == 3

    def test_bad_arguments(self):
        assert cli.main([]) == 2
        assert cli.main(["train", "--epochs", "many"]) == 2
        assert cli.main(["fly"]) == 2


class TestDataFiles:
    @pytest.fixture
    def seg_run(self, tmp_path):
        cfg = tiny_config(tmp_path, task="seg", **{"train.epochs": 1})
        assert cli.main(["train", "--config", str(cfg), "-q"]) == 0
        return cfg, tmp_path / "run" / "final.ckpt"

    @pytest.mark.parametrize("fmt", ["ply", "xyzn"])
    def test_gen_data_and_eval(self, tmp_path, seg_run, fmt, capsys):
        cfg, ckpt = seg_run
        data = tmp_path / f"data_{fmt}"
        assert cli.main(["gen-data", "--config", str(cfg), "--split", "eval", "--format", fmt,
                         "--output-dir", str(data), "-q"]) == 0
        manifest = read_csv(data / "manifest.csv")
        assert len(manifest) == 4 and all(r["file"].endswith(fmt) for r in manifest)
        capsys.readouterr()
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "-q"]) == 0
        from_files = capsys.readouterr().out.splitlines()[0]
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--split", "eval", "-q"]) == 0
        assert capsys.readouterr().out.splitlines()[0] == from_files

    def test_empty_dataset(self, tmp_path, seg_run):
        _, ckpt = seg_run
        (tmp_path / "empty").mkdir()
        (tmp_path / "empty" / "manifest.csv").write_text("file,category\n")
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "empty")]) == 3

    def test_infer_and_export(self, tmp_path, seg_run, capsys):
        cfg, ckpt = seg_run
        data = tmp_path / "d"
        assert cli.main(["gen-data", "--config", str(cfg), "--output-dir", str(data), "-q"]) == 0
        first = read_csv(data / "manifest.csv")[0]
        src, cat = str(data / first["file"]), first["category"]
        capsys.readouterr()
        assert cli.main(["infer", "--checkpoint", str(ckpt), "--input", src, "--category", cat, "-q"]) == 0
        counts = [int(m) for m in re.findall(r": (\d+) points", capsys.readouterr().out)]
        assert sum(counts) == 64
        out = tmp_path / "colored.ply"
        assert cli.main(["export", "--checkpoint", str(ckpt), "--input", src, "--category", cat,
                         "--output", str(out), "-q"]) == 0
        assert out.read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 64\n")
        assert cli.main(["infer", "--checkpoint", str(ckpt), "--input", src]) == 2  # no category
        assert cli.main(["infer", "--checkpoint", str(ckpt), "--input", src, "--category", "9"]) == 2

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.ckpt")]) == 3
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 4


class TestGradcheck:
    def test_single_op(self, capsys):
        assert cli.main(["gradcheck", "inner_self_attention"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3 and lines[1].startswith("inner_self_attention") and lines[1].endswith("ok")

    def test_unknown_op(self):
        assert cli.main(["gradcheck", "teleport"]) == 2

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        honest = F.softmax_rows

        def doubled_gradient(x):
            y = honest(x)
            return y * 2.0 - Tensor(y.data)  # same values, twice the gradient

        monkeypatch.setattr(F, "softmax_rows", doubled_gradient)
        assert cli.main(["gradcheck", "softmax", "linear"]) == 1
        out = capsys.readouterr().out
        assert re.search(r"^softmax .*FAIL$", out, re.M) and re.search(r"^linear .*ok$", out, re.M)


class TestAblate:
    def test_variant_sets(self):
        cfg = load_config(preset_path("ablate_desk.cfg")).resolved()
        pairs = variants_for("scale_pairing", cfg, 0.6, 0.3)
        assert len(pairs) == 4 and len({v.blocks for v in pairs}) == 4
        assert [v.name for v in variants_for("feature_mode", cfg, 0.6, 0.3)] == [
            "neighbor", "diff", "diff_neighbor", "diff_key", "diff_key_neighbor"]
        assert [v.name for v in variants_for("aggregation", cfg, 0.6, 0.3)] == list(AGG_LETTERS.values())
        first = pairs[0].tag
        assert "large sphere" in first and "small sphere" not in first

    def test_tables(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, task="seg", **{"train.epochs": 1})
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--config", str(cfg), "--axes", "aggregation,scale_pairing",
                         "--seeds", "0,1", "--output-dir", str(out), "-q"]) == 0
        agg = read_csv(out / "aggregation.csv")
        assert len(agg) == 8 and {r["variant"] for r in agg} == {"A", "B", "C", "D"}
        assert len(read_csv(out / "scale_pairing.csv")) == 8
        assert not (out / "feature_mode.csv").exists()
        for r in agg:
            assert 0.0 <= float(r["mIoU"]) <= 1.0 and 1 <= int(r["rank"]) <= 4
        means = {r["variant"]: float(r["mean"]) for r in agg}
        assert sorted(means, key=lambda v: -means[v])[0] == next(r["variant"] for r in agg if r["rank"] == "1")

    def test_bad_axes_and_seeds(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert cli.main(["ablate", "--config", str(cfg), "--axes", "colour"]) == 2
        assert cli.main(["ablate", "--config", str(cfg), "--seeds", "a,b"]) == 2
