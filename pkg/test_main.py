#!/usr/bin/env python3
"""
Unit tests for the command-line entry point.
"""

import json

import pytest

import config
import main
from checks import CheckResult
from data import load_patches, save_patches, synth_patches
from logger_config import close_handlers
from results_exporter import read_results, write_results


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "LOG_DIR", str(tmp_path / "logs"))
    yield
    close_handlers()


def _synth(tmp_path, *extra):
    out = str(tmp_path / "patches.bin")
    code = main.parse_and_dispatch([
        "synth", "--out", out, "--n-patches", "40", "--side", "4", "--raw", "--seed", "1", *extra,
    ])
    assert code == main.EXIT_OK
    return out


def test_unknown_model_is_usage_error(capsys):
    assert main.parse_and_dispatch(["train", "--model", "bogus"]) == main.EXIT_USAGE
    assert "--model" in capsys.readouterr().err


def test_unknown_flag_and_missing_command():
    assert main.parse_and_dispatch(["train", "--bogus", "1"]) == main.EXIT_USAGE
    assert main.parse_and_dispatch([]) == main.EXIT_USAGE


def test_print_config(capsys):
    assert main.parse_and_dispatch(["train", "--preset", "desk", "--k", "7", "--print-config"]) == main.EXIT_OK
    out = capsys.readouterr().out
    assert "epochs = 300" in out
    assert "k = 7" in out
    assert "beta_grid = 0.01, 0.5, 1.0, 2.0, 8.0" in out


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlearning_rate = 0.1\n")
    assert main.parse_and_dispatch(["train", "--config", str(bad)]) == main.EXIT_USAGE
    assert main.parse_and_dispatch(["train", "--config", str(tmp_path / "missing.ini")]) == main.EXIT_DATA


def test_synth_writes_train_and_validation_files(tmp_path):
    out = _synth(tmp_path)
    assert len(load_patches(out)) == 36
    assert len(load_patches(str(tmp_path / "patches_valid.bin"))) == 4


def test_preprocess_raw_file(tmp_path):
    raw = str(tmp_path / "raw.bin")
    save_patches(synth_patches(40, side=4, seed=0), raw)
    out = str(tmp_path / "proc.bin")
    code = main.parse_and_dispatch(["preprocess", "--data", raw, "--out", out, "--valid-fraction", "0"])
    assert code == main.EXIT_OK
    processed = load_patches(out)
    assert len(processed) == 40 and processed.side == 4
    assert not (tmp_path / "proc_valid.bin").exists()


def test_train_then_eval(tmp_path, capsys):
    data = _synth(tmp_path)
    run_dir = tmp_path / "run"
    code = main.parse_and_dispatch([
        "train", "--data", data, "--out", str(run_dir), "--model", "pvae", "--k", "3",
        "--epochs", "6", "--batch", "16", "--beta", "1.0",
    ])
    assert code == main.EXIT_OK
    assert "final total=" in capsys.readouterr().out
    for name in ("model.ckpt", "train_log.csv", "config.ini", "train_curve.png", "dictionary.png"):
        assert (run_dir / name).exists(), name
    assert len((run_dir / "train_log.csv").read_text().splitlines()) == 1 + 11

    code = main.parse_and_dispatch([
        "eval", "--checkpoint", str(run_dir / "model.ckpt"), "--data", str(tmp_path / "patches_valid.bin"),
        "--n-samples", "2", "--beta", "1.0",
    ])
    assert code == main.EXIT_OK
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert record["family"] == "pvae" and record["k"] == 3
    assert 0.0 <= record["pz"] <= 1.0


def test_train_requires_data(tmp_path):
    assert main.parse_and_dispatch(["train", "--out", str(tmp_path)]) == main.EXIT_USAGE
    code = main.parse_and_dispatch(["train", "--data", str(tmp_path / "missing.bin"), "--out", str(tmp_path)])
    assert code == main.EXIT_DATA


def test_train_rejects_bad_schedule(tmp_path):
    data = _synth(tmp_path)
    code = main.parse_and_dispatch(["train", "--data", data, "--out", str(tmp_path / "r"), "--epochs", "3"])
    assert code == main.EXIT_USAGE


def test_sweep_and_report(tmp_path, capsys):
    data = _synth(tmp_path)
    out = tmp_path / "sweep"
    code = main.parse_and_dispatch([
        "sweep", "--data", data, "--out", str(out), "--model", "grelu", "--k", "2",
        "--epochs", "6", "--batch", "16", "--workers", "1", "--n-samples", "1",
    ])
    assert code == main.EXIT_OK
    rows = read_results(str(out / "results.csv"))
    assert len(rows) == len(config.BETA_GRID)
    assert {r["family"] for r in rows} == {"grelu"}

    capsys.readouterr()
    assert main.parse_and_dispatch(["report", "--out", str(out)]) == main.EXIT_OK
    assert "mc_vs_beta:" in capsys.readouterr().out
    assert (out / "plots.txt").exists()


def test_report_errors(tmp_path):
    assert main.parse_and_dispatch(["report", "--results", str(tmp_path / "none.csv")]) == main.EXIT_DATA

    results = tmp_path / "results.csv"
    write_results(str(results), [{
        "family": "pvae", "k": 2, "beta": 1.0, "seed": 0, "status": "error", "epochs": 0,
        "final_total": float("nan"), "final_kl": float("nan"), "mc": float("nan"), "pz": float("nan"),
        "r2": float("nan"), "overall": float("nan"), "wall_seconds": 0.0,
    }])
    assert main.parse_and_dispatch(["report", "--results", str(results)]) == main.EXIT_EMPTY_REPORT

    results.write_text("not,a,results,file\n")
    assert main.parse_and_dispatch(["report", "--results", str(results)]) == main.EXIT_USAGE


def test_check_exit_codes(monkeypatch, capsys):
    passing = [CheckResult("a", True, "ok", 0.1), CheckResult("b", True, "ok", 0.2)]
    monkeypatch.setattr(main, "run_all_checks", lambda quick=False: passing)
    assert main.parse_and_dispatch(["check", "--quick"]) == main.EXIT_OK
    assert "PASS a" in capsys.readouterr().out

    failing = passing + [CheckResult("c", False, "bad", 0.3)]
    monkeypatch.setattr(main, "run_all_checks", lambda quick=False: failing)
    assert main.parse_and_dispatch(["check"]) == main.EXIT_NUMERICAL
    assert "FAIL c" in capsys.readouterr().out
