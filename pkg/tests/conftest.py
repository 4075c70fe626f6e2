from __future__ import annotations

import os
from pathlib import Path

import pytest

from cetflab.harness import ExperimentConfig, Workspace

# trained desk-scale models are keyed by their training config and reused across runs
CACHE = Path(os.environ.get("CETFLAB_CACHE", Path(__file__).resolve().parent.parent / ".model-cache"))


def workspace(tmp_root: Path, preset: str, **changes) -> Workspace:
    cfg = ExperimentConfig()
    cfg.attack.preset = preset
    for key, value in changes.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return Workspace(cfg, tmp_root / preset, cache_dir=CACHE)


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def badnets(runs_root) -> Workspace:
    return workspace(runs_root, "badnets")


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
