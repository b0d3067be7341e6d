"""Command-line entry points."""
from __future__ import annotations

import json
import os

import pytest

from mhflid.cli import main


def write_cfg(tmp_path, name="tiny.json", **over):
    cfg = {
        "task": "classification",
        "method": "mhpflid",
        "seed": 0,
        "dataset": {"num_samples": 120, "num_classes": 3, "image_size": 16},
        "clients": ["tiny_convnet_2", "tiny_convnet_3"],
        "partitioner": {"kind": "dirichlet", "alpha": 1.0, "min_per_split": 8},
        "rounds": {"rounds": 1, "epochs_injection": 1, "epochs_distillation": 1, "batch_size": 8},
    }
    cfg.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_validate_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["validate", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "config OK" in out
    assert "messenger" in out
    assert "tiny_convnet_3" in out


def test_validate_rejects_bad_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, method="warp")
    assert main(["validate", "--config", cfg]) == 2
    assert "error:" in capsys.readouterr().err


def test_validate_unknown_key_exit_code(tmp_path, capsys):
    path = tmp_path / "typo.json"
    path.write_text(json.dumps({"sede": 1}))
    assert main(["validate", "--config", str(path)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_run_writes_outputs(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "method=mhpflid seed=0 rounds=1" in stdout
    assert "client 0:" in stdout and "average:" in stdout
    assert f"outputs written to {out}" in stdout
    names = set(os.listdir(out))
    assert {"config.json", "metrics.csv", "summary.json", "cross_eval.csv", "probe_kl.csv", "disentanglement.csv"} <= names


def test_run_overrides(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = str(tmp_path / "local_run")
    assert main(["run", "--config", cfg, "--out", out, "--method", "local", "--seed", "3"]) == 0
    assert "method=local seed=3" in capsys.readouterr().out
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["method"] == "local" and summary["seed"] == 3
    assert "probe_kl.csv" not in os.listdir(out)  # baselines write no probe trace


def test_run_default_out_dir(tmp_path, capsys, monkeypatch):
    cfg = write_cfg(tmp_path, name="demo.json")
    monkeypatch.chdir(tmp_path)
    assert main(["run", "--config", cfg]) == 0
    assert os.path.isfile(tmp_path / "runs" / "demo_mhpflid_seed0" / "metrics.csv")


def test_run_missing_config_exit_code(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_compare_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run", "--config", cfg, "--out", d1]) == 0
    assert main(["run", "--config", cfg, "--out", d2]) == 0
    capsys.readouterr()
    assert main(["compare", d1, d2]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("run")
    assert len(table) == 3
    assert "mhpflid" in table[1]


def test_compare_missing_dir(tmp_path, capsys):
    assert main(["compare", str(tmp_path / "ghost")]) == 2
    assert "summary.json" in capsys.readouterr().err


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
