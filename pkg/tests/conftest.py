"""Shared fixtures: miniature configs and datasets, and the toy benchmark run."""

from pathlib import Path

import numpy as np
import pytest

from sdfrender import config as config_mod
from sdfrender.config import Config
from sdfrender.dataset import generate_dataset

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.cfg"
REFERENCE = ROOT / "benchmarks" / "toy_reference.csv"


def tiny_config(**overrides) -> Config:
    """Miniature float64 model for fast unit tests."""
    cfg = Config()
    values = {
        "scene.shape": "(sphere 0 0 0 0.5)", "scene.views": 3, "scene.resolution": 12,
        "scene.gt_resolution": 32, "pe.bands": 3, "model.depth": 3, "model.hidden": 16,
        "model.feature": 4, "model.color_depth": 2, "model.color_hidden": 8,
        "train.iterations": 4, "train.batch_rays": 8, "sample.uniform": 8,
        "sample.importance": 8, "mesh.resolution": 24,
    }
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    for k, v in values.items():
        cfg.set(k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_config())


@pytest.fixture(scope="session")
def toy_runs():
    """Full and base-only training on the toy benchmark config (the slow part)."""
    from sdfrender.pipeline import run_benchmark

    cfg = config_mod.load(TOY_CONFIG)
    return {"config": cfg, "full": run_benchmark(cfg, False), "base": run_benchmark(cfg, True)}


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
