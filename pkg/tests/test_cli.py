import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from edrl import cli, data

import tiny


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(tiny.spec().to_dict()))
    (d / "cfg.json").write_text(tiny.config(epochs=2).to_json())
    assert cli.main(["generate-data", "--spec", str(d / "spec.json"), "--out", str(d / "data.edrl")]) == 0
    rc = cli.main(["train", "--config", str(d / "cfg.json"), "--data", str(d / "data.edrl"),
                   "--out", str(d / "model.ckpt"), "--regime", "noise:0.5:M1"])
    assert rc == 0
    return d


def _run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_generate_seed_override(tmp_path, capsys):
    rc, out, _ = _run(capsys, "generate-data", "--seed", 5, "--out", tmp_path / "d.edrl")
    assert rc == 0 and "320 train / 80 test" in out
    batches, spec = data.load(tmp_path / "d.edrl")
    assert spec.seed == 5 and np.array_equal(batches["test"].m1, data.generate(spec)[1].m1)


def test_train_writes_history_and_plot(workspace):
    rows = list(csv.DictReader(open(workspace / "model.history.csv")))
    assert len(rows) == 2 * 3 and rows[0].keys() == {"epoch", "regime", "acc", "auc", "f1"}
    assert {r["regime"] for r in rows} == {"complete", "noise:0.5:M1", "missing:M2"}
    assert (workspace / "model.history.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_twice_identical(workspace, capsys):
    args = ["eval", "--ckpt", workspace / "model.ckpt", "--data", workspace / "data.edrl", "--regime", "missing:M2"]
    rc1, out1, _ = _run(capsys, *args, "--report", workspace / "r.json")
    rc2, out2, _ = _run(capsys, *args)
    assert rc1 == rc2 == 0 and out1 == out2
    rep = json.loads((workspace / "r.json").read_text())
    assert set(rep) == {"config", "regime", "acc", "auc", "f1", "per_class", "seed", "epoch"}
    assert rep["regime"] == "missing:M2" and rep["epoch"] == 2 and rep["config"]["regime"] == "noise:0.5:M1"


@pytest.mark.parametrize("what", ["embeddings", "correlation"])
def test_export_csv(workspace, capsys, what):
    out = workspace / f"{what}.csv"
    rc, _, _ = _run(capsys, "export", "--what", what, "--format", "csv", "--ckpt", workspace / "model.ckpt",
                    "--data", workspace / "data.edrl", "--out", out)
    assert rc == 0
    rows = list(csv.reader(open(out)))
    if what == "embeddings":
        assert rows[0][0] == "label" and len(rows) == 1 + 5 and len(rows[1]) == 1 + 13
    else:
        c = np.array(rows, dtype=float)
        assert c.shape == (8, 8) and np.all(np.abs(c) <= 1 + 1e-9)


@pytest.mark.parametrize("what", ["embeddings", "correlation"])
def test_export_png(workspace, capsys, what):
    out = workspace / "plots" / f"{what}.png"
    rc, _, _ = _run(capsys, "export", "--what", what, "--format", "png", "--ckpt", workspace / "model.ckpt",
                    "--data", workspace / "data.edrl", "--regime", "noise:0.5:M2", "--out", out)
    assert rc == 0 and out.read_bytes()[:4] == b"\x89PNG"


def test_sweep_p_to_csv(workspace, capsys):
    out = workspace / "sweep.csv"
    rc, _, _ = _run(capsys, "sweep", "--param", "p", "--values", "0.3,0.4,0.5,0.6,0.7", "--config",
                    workspace / "cfg.json", "--spec", workspace / "spec.json", "--epochs", 1, "--out", out)
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    assert [float(r["p"]) for r in rows] == [0.3, 0.4, 0.5, 0.6, 0.7]
    assert all(0 <= float(r["acc"]) <= 1 for r in rows)
    assert out.with_suffix(".png").exists()


def test_sweep_noise_to_stdout(workspace, capsys):
    rc, out, _ = _run(capsys, "sweep", "--param", "noise_var", "--values", "0,1", "--seeds", "0,1", "--config",
                      workspace / "cfg.json", "--spec", workspace / "spec.json", "--epochs", 1, "--regime", "M2")
    assert rc == 0
    rows = list(csv.reader(out.splitlines()))
    assert rows[0] == ["noise_var", "seed", "acc", "auc", "f1"] and len(rows) == 5


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["train", "--data", "x"],
    ["eval", "--ckpt", "a", "--data", "b", "--bogus"],
    ["train", "--data", "x", "--out", "y", "--regime", "noise:abc:M1"],
    ["sweep", "--param", "q", "--values", "1"],
    ["sweep", "--param", "noise_var", "--values", "1", "--regime", "complete"],
])
def test_usage_errors_exit_1(argv, capsys):
    rc, _, err = _run(capsys, *argv)
    assert rc == 1 and err.strip()


def test_unknown_flag_prints_usage(capsys):
    rc, _, err = _run(capsys, "eval", "--ckpt", "a", "--data", "b", "--bogus")
    assert rc == 1 and err.startswith("usage: edrl") and "--bogus" in err


def test_data_errors_exit_2(workspace, tmp_path, capsys):
    assert _run(capsys, "eval", "--ckpt", tmp_path / "nope.ckpt", "--data", workspace / "data.edrl")[0] == 2
    bad = tmp_path / "bad.edrl"
    raw = bytearray((workspace / "data.edrl").read_bytes())
    raw[-1] ^= 0x10
    bad.write_bytes(bytes(raw))
    rc, _, err = _run(capsys, "eval", "--ckpt", workspace / "model.ckpt", "--data", bad)
    assert rc == 2 and "checksum" in err.lower()
    # default config expects 16-wide tokens, the tiny data has 6
    rc, _, err = _run(capsys, "train", "--data", workspace / "data.edrl", "--out", tmp_path / "m.ckpt")
    assert rc == 2 and "geometry" in err
    (tmp_path / "cfg.json").write_text("{not json")
    assert _run(capsys, "train", "--config", tmp_path / "cfg.json", "--data", workspace / "data.edrl",
                "--out", tmp_path / "m.ckpt")[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(workspace, tmp_path, capsys):
    batches, spec = data.load(workspace / "data.edrl")
    batches["train"].m1[:] = 1e300
    data.save(tmp_path / "huge.edrl", batches, spec)
    rc, _, err = _run(capsys, "train", "--config", workspace / "cfg.json", "--data", tmp_path / "huge.edrl",
                      "--out", tmp_path / "m.ckpt")
    assert rc == 3 and "diverged at step 0" in err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "edrl.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate-data" in res.stdout
