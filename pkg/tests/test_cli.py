import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cprl import cli
from cprl.config import ConfigError, RunConfig

SMALL = {
    "data": {"scenes": 5, "levels": 3, "size": 8},
    "model": {"widths": [2, 3]},
    "cprl": {"channels": 4, "tau": 0.5},
    "train": {"epochs": 1, "batch_size": 8, "lr": 1e-2},
    "analysis": {"n_images": 2, "landscape_resolution": 3, "batch_size": 16},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out.strip(), out.err


@pytest.fixture
def trained(tmp_path, cfg_file, capsys):
    code, path, _ = run(["train", "--config", cfg_file, "--out", str(tmp_path / "runs"), "--run-name", "t"], capsys)
    assert code == 0
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_writes_artifacts(trained):
    for name in ("split.json", "init.ckpt", "best.ckpt", "final.ckpt", "curve.csv", "report.json"):
        assert os.path.isfile(os.path.join(trained, name)), name
    assert not os.path.exists(os.path.join(trained, ".lock"))
    rep = json.load(open(os.path.join(trained, "report.json")))
    assert rep["command"] == "train" and len(rep["config_hash"]) == 12
    assert {r["split"] for r in rep["rows"]} == {"train", "test"}
    assert all(r["config_hash"] == rep["config_hash"] for r in rep["rows"])
    curve = read_csv(os.path.join(trained, "curve.csv"))
    assert list(curve[0]) == list(cli.CURVE_FIELDS)


def test_zero_epochs_reports_initial_model(tmp_path, cfg_file, capsys):
    code, path, _ = run(["train", "--config", cfg_file, "--epochs", "0", "--out", str(tmp_path)], capsys)
    assert code == 0
    init = open(os.path.join(path, "init.ckpt"), "rb").read()
    assert init == open(os.path.join(path, "final.ckpt"), "rb").read()
    assert init == open(os.path.join(path, "best.ckpt"), "rb").read()
    assert read_csv(os.path.join(path, "curve.csv")) == []


def test_zero_epsilon_attack_keeps_scores(tmp_path, cfg_file, trained, capsys):
    ckpt = os.path.join(trained, "final.ckpt")
    code, path, _ = run(["attack", "--config", cfg_file, "--checkpoint", ckpt, "--epsilon", "0",
                         "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = read_csv(os.path.join(path, "scores.csv"))
    assert all(r["clean"] == r["adversarial"] for r in rows)
    rep = json.load(open(os.path.join(path, "report.json")))
    assert rep["linf"] == 0.0


def test_sweep_matches_single_attacks(tmp_path, cfg_file, trained, capsys):
    ckpt = os.path.join(trained, "final.ckpt")
    code, path, _ = run(["sweep", "--config", cfg_file, "--checkpoint", ckpt, "--epsilon-grid", "0,2/255",
                         "--out", str(tmp_path), "--run-name", "s"], capsys)
    assert code == 0
    sweep = read_csv(os.path.join(path, "sweep.csv"))
    assert list(sweep[0]) == ["epsilon", "srcc", "plcc", "mse"]
    code, apath, _ = run(["attack", "--config", cfg_file, "--checkpoint", ckpt, "--epsilon", "2/255",
                          "--out", str(tmp_path), "--run-name", "a"], capsys)
    attacked = json.load(open(os.path.join(apath, "report.json")))["rows"][1]
    assert float(sweep[1]["epsilon"]) == attacked["epsilon"]
    assert float(sweep[1]["srcc"]) == attacked["srcc"]
    assert float(sweep[1]["mse"]) == attacked["mse"]


def test_landscape_and_dump(tmp_path, cfg_file, trained, capsys):
    ckpt = os.path.join(trained, "final.ckpt")
    code, path, _ = run(["landscape", "--config", cfg_file, "--checkpoint", ckpt, "--out", str(tmp_path)], capsys)
    assert code == 0
    grid = np.loadtxt(os.path.join(path, "landscape_000.csv"), delimiter=",")
    assert grid.shape == (3, 3)
    axes = json.load(open(os.path.join(path, "landscape_axes.json")))
    assert axes["u"] == [-1.0, 0.0, 1.0]
    code, path, _ = run(["dump", "--config", cfg_file, "--checkpoint", ckpt, "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = read_csv(os.path.join(path, "activations.csv"))
    assert [int(r["rank"]) for r in rows] == [0, 1, 2, 3]


def test_generate_writes_archive(tmp_path, cfg_file, capsys):
    code, path, _ = run(["generate", "--config", cfg_file, "--out", str(tmp_path)], capsys)
    assert code == 0
    rep = json.load(open(os.path.join(path, "report.json")))
    assert rep["samples"] == 5 * 7
    code, path2, _ = run(["train", "--config", cfg_file, "--epochs", "0", "--data", os.path.join(path, "dataset"),
                          "--split", os.path.join(path, "split.json"), "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.load(open(os.path.join(path2, "split.json")))["test"] == rep["test_scenes"]


def test_rerun_is_byte_identical(tmp_path, cfg_file, capsys):
    out = str(tmp_path / "runs")
    paths = [run(["train", "--config", cfg_file, "--seed", "3", "--out", out, "--run-name", n], capsys)[1]
             for n in ("a", "b")]
    for name in ("report.json", "curve.csv", "final.ckpt", "best.ckpt"):
        assert open(os.path.join(paths[0], name), "rb").read() == open(os.path.join(paths[1], name), "rb").read()


def test_exit_codes_are_distinct(tmp_path, cfg_file, trained, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"train": {"epochz": 1}}))
    assert run(["train", "--config", str(bad_cfg), "--out", str(tmp_path)], capsys)[0] == cli.EXIT_CONFIG

    assert run(["attack", "--config", cfg_file, "--checkpoint", str(tmp_path / "none.ckpt"),
                "--out", str(tmp_path)], capsys)[0] == cli.EXIT_CHECKPOINT

    mismatched = tmp_path / "k5.json"
    mismatched.write_text(json.dumps({**SMALL, "cprl": {"channels": 5}}))
    assert run(["attack", "--config", str(mismatched), "--checkpoint", os.path.join(trained, "final.ckpt"),
                "--out", str(tmp_path)], capsys)[0] == cli.EXIT_CHECKPOINT

    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["train", "--config", cfg_file, "--out", str(blocker)], capsys)[0] == cli.EXIT_OUTPUT

    assert run(["train", "--config", cfg_file, "--data", str(tmp_path / "nowhere"),
                "--out", str(tmp_path)], capsys)[0] == cli.EXIT_DATA
    assert len({cli.EXIT_CONFIG, cli.EXIT_CHECKPOINT, cli.EXIT_OUTPUT, cli.EXIT_DATA, cli.EXIT_ERROR}) == 5


def test_locked_run_dir_is_refused(tmp_path, cfg_file, capsys):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / ".lock").write_text("1")
    code, _, err = run(["train", "--config", cfg_file, "--out", str(tmp_path), "--run-name", "x"], capsys)
    assert code == cli.EXIT_OUTPUT and "locked" in err


def test_output_root_from_environment(tmp_path, cfg_file, capsys, monkeypatch):
    monkeypatch.setenv("CPRL_OUT", str(tmp_path / "env"))
    code, path, _ = run(["train", "--config", cfg_file, "--epochs", "0"], capsys)
    assert code == 0 and path.startswith(str(tmp_path / "env"))


def test_config_command_prints_effective_config(cfg_file, capsys):
    code, out, _ = run(["config", "--config", cfg_file, "--b", "0.2", "--no-pns", "--epsilon", "1/255"], capsys)
    assert code == 0
    d = json.loads(out)
    assert d["cprl"]["bias"] == 0.2 and d["train"]["pns"] is False
    assert d["attack"]["epsilon"] == 1 / 255


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_dict({"cprl": {"bais": 0.1}})
    with pytest.raises(ConfigError, match="unknown config section"):
        RunConfig.from_dict({"optim": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"cprl": {"tau": -1}})


def test_config_round_trip_and_hash():
    cfg = RunConfig.from_dict(SMALL)
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict() and again.hash() == cfg.hash()
    assert cfg.override(output__root="/elsewhere").hash() == cfg.hash()
    assert cfg.override(cprl__bias=0.1).hash() != cfg.hash()


def test_module_entry_point(tmp_path, cfg_file):
    proc = subprocess.run([sys.executable, "-m", "cprl", "config", "--config", cfg_file],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["data"]["scenes"] == 5
