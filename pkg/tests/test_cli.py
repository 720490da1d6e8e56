import csv
import os
import shutil
import subprocess

import pytest

from trajsel.cli import cli
from trajsel.generator import vocabulary_for
from trajsel.planner import PlannerModel
from trajsel.scenario import load_dataset
from trajsel.vocab import VocabSpec

TINY_INI = """\
[generator]
vocab_n_curvature = 4
vocab_n_speed = 3
vocab_n_accel = 2

[planner]
hidden_dim = 16
coarse_layers = 1
refine_layers = 1
attn_heads = 2
ff_dim = 32
top_k = 8
batch_size = 2
epochs = 1
lr = 2e-3
ema_mode = scratch
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> labels -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    out = root / "run"
    base = ["--config", str(ini), "--out", str(out), "--seed", "3"]
    data = out / "data.jsonl"
    assert cli(base + ["gen", "--count", "4", "--name", "data.jsonl"]) == 0
    assert cli(base + ["labels", "--dataset", str(data)]) == 0
    assert cli(
        base + ["train", "--dataset", str(data), "--split", "train",
                "--name", "model.ckpt"]
    ) == 0
    return {
        "ini": ini,
        "out": out,
        "base": base,
        "data": data,
        "ckpt": out / "model.ckpt",
    }


def eval_args(p, extra=()):
    return p["base"] + [
        "eval", "--dataset", str(p["data"]), "--split", "train",
        "--checkpoint", str(p["ckpt"]), *extra,
    ]


class TestGen:
    def test_dataset_contents(self, pipeline):
        ds = load_dataset(pipeline["data"])
        assert len(ds.records) == 4
        assert all(r.split == "train" for r in ds.records)

    def test_reported_line_and_determinism(self, pipeline, tmp_path, capsys):
        args = ["--config", str(pipeline["ini"]), "--seed", "3",
                "gen", "--count", "4", "--name", "again.jsonl"]
        assert cli(["--out", str(tmp_path / "a"), *args]) == 0
        assert cli(["--out", str(tmp_path / "b"), *args]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert all("records=4" in line for line in lines)
        assert lines[0].split("sha256=")[1] == lines[1].split("sha256=")[1]

    def test_seed_changes_dataset(self, pipeline, tmp_path, capsys):
        args = ["--config", str(pipeline["ini"]), "--out", str(tmp_path),
                "gen", "--count", "2", "--name", "s.jsonl"]
        assert cli(["--seed", "3", *args]) == 0
        assert cli(["--seed", "4", *args]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].split("sha256=")[1] != lines[1].split("sha256=")[1]


class TestLabels:
    def test_sidecar_written(self, pipeline):
        assert os.path.exists(str(pipeline["data"]) + ".labels.npz")

    def test_relabel_is_deterministic(self, pipeline, capsys):
        assert cli(
            pipeline["base"] + ["labels", "--dataset", str(pipeline["data"])]
        ) == 0
        first = capsys.readouterr().out
        assert cli(
            pipeline["base"] + ["labels", "--dataset", str(pipeline["data"])]
        ) == 0
        assert capsys.readouterr().out == first
        assert "scenarios=4" in first


class TestTrain:
    def test_artifacts(self, pipeline):
        assert pipeline["ckpt"].exists()
        assert (pipeline["out"] / "model.ckpt.log.jsonl").exists()
        vocab = vocabulary_for(VocabSpec(n_curvature=4, n_speed=3, n_accel=2))
        model = PlannerModel.load(pipeline["ckpt"], vocab)
        assert model.cfg.hidden_dim == 16

    def test_status_line(self, pipeline, capsys):
        assert cli(
            pipeline["base"] + ["train", "--dataset", str(pipeline["data"]),
                                "--split", "train", "--name", "again.ckpt"]
        ) == 0
        out = capsys.readouterr().out
        assert "steps=2" in out and "ok" in out and "sha256=" in out


class TestEval:
    def test_report_files(self, pipeline, capsys):
        assert cli(eval_args(pipeline)) == 0
        out = capsys.readouterr().out
        assert "scenarios: 4" in out and "aggregate" in out
        assert (pipeline["out"] / "eval.txt").exists()
        rows = list(csv.reader((pipeline["out"] / "eval.csv").open()))
        assert rows[0][0] == "row" and rows[1][0] == "mean"
        assert len(rows) == 2 + 4

    def test_plots_flag(self, pipeline, capsys):
        assert cli(eval_args(pipeline, ["--plots"])) == 0
        capsys.readouterr()
        svg = (pipeline["out"] / "eval.svg").read_text()
        assert svg.startswith("<svg")


class TestOracle:
    def test_table(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "oracle", "--dataset", str(pipeline["data"]), "--split", "train",
            "--checkpoint", str(pipeline["ckpt"]), "--ks", "1,2,8"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "best-in-top-K" in out
        body = (pipeline["out"] / "oracle.csv").read_text()
        assert body.splitlines()[0] == "K,best-in-top-K"
        assert len(body.strip().splitlines()) == 4

    def test_bad_ks_is_usage_error(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "oracle", "--dataset", str(pipeline["data"]), "--split", "train",
            "--checkpoint", str(pipeline["ckpt"]), "--ks", "1,x"])
        assert rc == 1
        assert "comma list" in capsys.readouterr().err


class TestSplitEval:
    def test_bucket_rows(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "split-eval", "--dataset", str(pipeline["data"]),
            "--split", "train", "--checkpoint", str(pipeline["ckpt"])])
        assert rc == 0
        capsys.readouterr()
        rows = list(csv.reader((pipeline["out"] / "splits.csv").open()))
        assert [r[0] for r in rows] == ["bucket", "left", "forward", "right"]
        assert sum(int(r[1]) for r in rows[1:]) == 4


class TestDistHist:
    def test_original_and_augmented_rows(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "dist-hist", "--dataset", str(pipeline["data"]),
            "--split", "train", "--bins", "6", "--plots"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "original" in out and "augmented" in out
        rows = list(csv.reader((pipeline["out"] / "dist-hist.csv").open()))
        assert rows[0][1] == "KL-to-uniform"
        assert len(rows) == 3
        assert (pipeline["out"] / "dist-hist.svg").exists()


class TestFovSweep:
    def test_with_checkpoint(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "fov-sweep", "--dataset", str(pipeline["data"]),
            "--split", "train", "--checkpoint", str(pipeline["ckpt"])])
        assert rc == 0
        capsys.readouterr()
        rows = list(csv.reader((pipeline["out"] / "fov-sweep.csv").open()))
        assert [r[0] for r in rows[1:]] == ["1", "3", "5"]
        assert all(r[3] != "-" for r in rows[1:])

    def test_without_checkpoint(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "fov-sweep", "--dataset", str(pipeline["data"]), "--split", "train"])
        assert rc == 0
        capsys.readouterr()
        rows = list(csv.reader((pipeline["out"] / "fov-sweep.csv").open()))
        assert all(r[3] == "-" for r in rows[1:])


class TestInfer:
    def test_selects_one_entry(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "infer", "--dataset", str(pipeline["data"]), "--split", "train",
            "--checkpoint", str(pipeline["ckpt"]), "--index", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "scenario 1: entry" in out and "kappa=" in out
        assert "predicted subscores:" in out

    def test_index_out_of_range(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "infer", "--dataset", str(pipeline["data"]), "--split", "train",
            "--checkpoint", str(pipeline["ckpt"]), "--index", "99"])
        assert rc == 1
        assert "outside the split" in capsys.readouterr().err


class TestExitCodes:
    def test_no_subcommand(self, capsys):
        assert cli([]) == 1
        assert "subcommand" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli(["frobnicate"]) == 1
        capsys.readouterr()

    def test_missing_required_flag(self, pipeline, capsys):
        assert cli(pipeline["base"] + ["labels"]) == 1
        assert "--dataset" in capsys.readouterr().err

    def test_missing_checkpoint_is_runtime_error(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "eval", "--dataset", str(pipeline["data"]), "--split", "train",
            "--checkpoint", str(pipeline["out"] / "nope.ckpt")])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and "not found" in err

    def test_missing_dataset_is_runtime_error(self, pipeline, capsys):
        rc = cli(pipeline["base"] + ["labels", "--dataset", "absent.jsonl"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_empty_split_is_usage_error(self, pipeline, capsys):
        rc = cli(pipeline["base"] + [
            "eval", "--dataset", str(pipeline["data"]), "--split", "val",
            "--checkpoint", str(pipeline["ckpt"])])
        assert rc == 1
        assert "no records" in capsys.readouterr().err

    def test_bad_config_path(self, tmp_path, capsys):
        rc = cli(["--config", str(tmp_path / "no.ini"), "--out", str(tmp_path),
                  "gen", "--count", "1"])
        assert rc == 2
        capsys.readouterr()


class TestLabelCache:
    def test_stale_cache_noted_and_ignored(self, pipeline, tmp_path, capsys):
        other = tmp_path / "other.ini"
        other.write_text(TINY_INI + "\n[evaluator]\nmax_jerk = 9.0\n")
        rc = cli(["--config", str(other), "--out", str(tmp_path),
                  "eval", "--dataset", str(pipeline["data"]),
                  "--split", "train", "--checkpoint", str(pipeline["ckpt"])])
        assert rc == 0
        assert "stale label cache" in capsys.readouterr().err


class TestThreadCap:
    def test_bad_value_is_usage_error(self, monkeypatch, capsys):
        monkeypatch.setenv("SUPRIM_THREADS", "two")
        assert cli(["gen", "--count", "0"]) == 1
        assert "SUPRIM_THREADS" in capsys.readouterr().err

    def test_cap_exports_thread_vars(self, pipeline, monkeypatch, tmp_path, capsys):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        monkeypatch.setenv("SUPRIM_THREADS", "2")
        rc = cli(["--config", str(pipeline["ini"]), "--out", str(tmp_path),
                  "gen", "--count", "1"])
        assert rc == 0
        capsys.readouterr()
        assert os.environ["OMP_NUM_THREADS"] == "2"


class TestConsoleScript:
    def test_entry_point_installed(self):
        exe = shutil.which("trajsel")
        assert exe, "console script not on PATH"
        out = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        assert "gen" in out.stdout and "fov-sweep" in out.stdout
