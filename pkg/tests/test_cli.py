import json
import subprocess
import sys

import pytest

from adapool import cli
from adapool.datagen import read_dataset
from adapool.tasks import read_labels
from adapool.train_eval import EvalReport

SMALL_DATA = ["--count", "40", "--N", "6", "--d", "3"]
TINY_TRAIN = ["--epochs", "1", "--folds", "2", "--set", "encoder.num_layers=1", "--set", "encoder.num_heads=2",
              "--set", "encoder.dim_hidden=4", "--set", "encoder.dim_ff=8", "--set", "train.batch_size=16"]


def run(*argv):
    return cli.run([str(a) for a in argv])


def test_gen_data_is_byte_identical_and_echoed(tmp_path, capsys):
    assert run("gen-data", *SMALL_DATA, "--seed", 5, "--out", tmp_path / "a") == 0
    assert run("gen-data", *SMALL_DATA, "--seed", 5, "--out", tmp_path / "b") == 0
    a, b = (tmp_path / "a" / "data.pbs").read_bytes(), (tmp_path / "b" / "data.pbs").read_bytes()
    assert a == b
    out = capsys.readouterr().out
    assert "# effective config (gen-data)" in out
    ds = read_dataset(tmp_path / "a" / "data.pbs")
    assert (ds.count, ds.N, ds.d, ds.seed) == (40, 6, 3, 5)
    # the saved effective config alone reproduces the run
    saved = tmp_path / "a" / "gen-data.config.json"
    assert run("gen-data", "--config", saved, "--out", tmp_path / "c") == 0
    assert (tmp_path / "c" / "data.pbs").read_bytes() == a


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"data.count": 7, "data.N": 4, "data.d": 2, "seed": 1}))
    assert run("gen-data", "--config", conf, "--count", 9, "--out", tmp_path) == 0
    ds = read_dataset(tmp_path / "data.pbs")
    assert (ds.count, ds.N, ds.seed) == (9, 4, 1)
    assert run("gen-data", "--config", conf, "--set", "data.N=5", "--out", tmp_path) == 0
    assert read_dataset(tmp_path / "data.pbs").N == 5


def test_resolve_config_types():
    cfg = cli.resolve_config({"train.lr": 1}, {"train.methods": "ada,avg", "encoder.bias_attn": "true",
                                               "encoder.adapool_heads": "4"})
    assert cfg["train.lr"] == 1.0 and cfg["train.methods"] == ["ada", "avg"]
    assert cfg["encoder.bias_attn"] is True and cfg["encoder.adapool_heads"] == 4
    assert cli.resolve_config(overrides={"encoder.adapool_heads": "none"})["encoder.adapool_heads"] is None
    for bad in ({"nope": 1}, {"data.N": "x"}, {"data.N": None}, {"encoder.bias_attn": 3}):
        with pytest.raises(cli.ConfigValidationError):
            cli.resolve_config(bad)


@pytest.mark.parametrize("argv", [
    ["gen-data", "--bogus", "1"],
    ["frobnicate"],
    ["gen-data", "--set", "no_such.key=1"],
    ["gen-data", "--set", "novalue"],
    ["gen-data", "--count", "many"],
    ["gen-data", "--seed", "-1"],
    ["gen-data", "--config", "/nonexistent/c.json"],
])
def test_validation_errors_exit_1(argv, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_prints_usage(tmp_path, capsys):
    assert run("bench", "--frobnicate", "--out", tmp_path) == 1
    assert "usage:" in capsys.readouterr().err


def test_invalid_values_exit_1(tmp_path):
    assert run("gen-data", "--N", 0, "--out", tmp_path) == 1
    assert run("train", "--out", tmp_path / "empty") == 1  # no dataset yet
    assert run("eval", "--out", tmp_path) == 1  # no checkpoint


def test_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("gen-data", *SMALL_DATA, "--out", out) == 0
    assert run("make-targets", "--k", "1,2", "--out", out) == 0
    assert read_labels(out / "labels_k2.pbt").k == 2
    assert run("make-targets", "--k", "9", "--out", out) == 1  # k >= N
    assert run("train", "--k", "1,2", "--method", "ada,avg", *TINY_TRAIN, "--out", out) == 0
    rep = EvalReport.from_json((out / "report.json").read_text())
    assert {(r["method"], r["k"]) for r in rep.rows} == {("ada", 1), ("avg", 1), ("ada", 2), ("avg", 2)}
    assert (out / "report.csv").exists() and (out / "train.config.json").exists()
    ckpt = out / "checkpoints" / "ada_k2_fold1.ckpt"
    assert run("eval", "--checkpoint", ckpt, "--k", "1,2", "--folds", 2, "--out", out) == 0
    res = json.loads((out / "eval.json").read_text())
    fold = next(f for f in rep.folds if (f["method"], f["k"], f["fold"]) == ("ada", 2, 1))
    assert res["k"] == 2 and res["loss"] == fold["holdout_loss"]


def test_train_report_reproducible(tmp_path):
    for name in ("a", "b"):
        o = tmp_path / name
        assert run("gen-data", *SMALL_DATA, "--out", o) == 0
        assert run("train", "--method", "max", *TINY_TRAIN, "--out", o) == 0
    strip = [EvalReport.from_json((tmp_path / n / "report.json").read_text()) for n in "ab"]
    assert strip[0].to_json(timing=False) == strip[1].to_json(timing=False)


def test_aggregation_targets_via_cli(tmp_path):
    assert run("gen-data", *SMALL_DATA, "--out", tmp_path) == 0
    assert run("make-targets", "--kind", "min", "--out", tmp_path) == 0
    assert read_labels(tmp_path / "labels_min.pbt").kind == "min"


def test_verify_bounds_example(tmp_path):
    assert run("verify-bounds", "--cases", 100000, "--seed", 7, "--out", tmp_path) == 0
    lines = (tmp_path / "bounds_report.csv").read_text().strip().split("\n")
    assert len(lines) == 101


def test_verify_corollaries_pass_and_fail(tmp_path):
    assert run("verify-corollaries", "--trials", 50, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "corollaries.json").read_text())["max_ok"]
    # an impossible tolerance turns the same check into a verification failure
    assert run("verify-corollaries", "--trials", 50, "--set", "corollaries.max_tol=1e-30", "--out", tmp_path) == 2


def test_bench_exit_codes(tmp_path):
    base = ["--method", "avg", "--Ns", "1000,2000,4000", "--reps", "5", "--out", tmp_path]
    assert run("bench", *base, "--set", "bench.slope_min=0", "--set", "bench.slope_max=5") == 0
    assert (tmp_path / "bench.csv").read_text().startswith("method,N,d,median_ns,slope")
    assert run("bench", *base, "--set", "bench.slope_min=10", "--set", "bench.slope_max=20") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adapool.cli", "verify-corollaries", "--trials", "5",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "# effective config" in proc.stdout
