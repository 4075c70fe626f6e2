from __future__ import annotations

import json
import subprocess
import sys

import pytest

from cetflab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, main

from .test_harness import TINY_INI


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("cli_run") / "run"
    assert main(["run-all", "--config", str(cfg_file), "--out", str(out)]) == EXIT_OK
    return out


def test_stepwise_subcommands(tmp_path, cfg_file, capsys):
    out = tmp_path / "steps"
    common = ["--config", str(cfg_file), "--out", str(out)]
    assert main(["synth", *common]) == EXIT_OK
    assert (out / "train_clean.cbds").exists()
    capsys.readouterr()
    assert main(["poison", *common]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["poisoned_train"] == 40
    assert main(["train", *common]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", *common]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) >= {"accu", "asr", "n", "m"}
    assert main(["detect", *common]) == EXIT_OK
    assert (out / "verdicts.jsonl").exists()
    assert main(["repair", *common, "--method", "bn_clean"]) == EXIT_OK
    capsys.readouterr()
    assert main(["sweep", *common, "--parameter", "alpha", "--values", "0.3,0.5"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "parameter,value,n,flagged,asr"
    assert main(["histogram", *common]) == EXIT_OK
    assert (out / "histogram.csv").exists() and (out / "ratios.jsonl").exists()


def test_verify_ok_and_failure(run_dir, capsys):
    assert main(["verify", "--out", str(run_dir)]) == EXIT_OK
    report = json.loads((run_dir / "report.json").read_text())
    report["asr"] = 0.5 if report["asr"] != 0.5 else 0.25
    (run_dir / "report.json").write_text(json.dumps(report))
    assert main(["verify", "--out", str(run_dir)]) == EXIT_VERIFY
    assert "MISMATCH asr" in capsys.readouterr().out


def test_config_errors_exit_2(tmp_path, cfg_file):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = lots\n")
    assert main(["eval", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["eval", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["train", "--config", str(cfg_file), "--preset", "nope", "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    assert main(["detect", "--config", str(cfg_file), "--threads", "0"]) == EXIT_CONFIG


def test_data_errors_exit_3(tmp_path):
    run = tmp_path / "broken"
    run.mkdir()
    (run / "report.json").write_text("{not json")
    assert main(["verify", "--out", str(run)]) == EXIT_DATA


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "cetflab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("synth", "train", "poison", "eval", "detect", "repair", "sweep", "histogram", "run-all", "verify"):
        assert name in proc.stdout
