"""Shared fixtures.

``trained_run`` trains the default desk-scale configuration once per session
through the CLI and hands the checkpoint, log and held-out split to every test
that needs a trained model.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from semdepth import cli, dataset as ds
from semdepth.config import RunConfig, load_config
from semdepth.pipeline import Pipeline, load_training_samples

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_run")
    cfg_path = root / "config.json"
    cfg_path.write_text(RunConfig(seed=0).dumps())
    started = time.perf_counter()
    code = cli.main(["train", "--config", str(cfg_path), "--out", str(root / "run")])
    elapsed = time.perf_counter() - started
    assert code == 0
    log = json.loads((root / "run" / "train_log.json").read_text())
    cfg = load_config(cfg_path)
    splits, profile = load_training_samples(cfg)
    return {
        "dir": root / "run",
        "config_path": cfg_path,
        "checkpoint": root / "run" / "model.ckpt",
        "pipe": Pipeline.load(root / "run" / "model.ckpt"),
        "log": log,
        "stages": log["stages"],
        "splits": splits,
        "profile": profile,
        "elapsed": elapsed,
    }


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return ds.corpus("synthetic", 20, 99, 32, 32)


def pytest_collection_modifyitems(items):
    # anything that needs the shared training run is slow
    for item in items:
        if "trained_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
