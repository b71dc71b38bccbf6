"""Shared fixtures. The trained toy model is expensive (~2.5 min), so it is
built once per session and cached on disk keyed by the training config and
the source of every module that influences the weights."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

import emag_lab
from emag_lab.model import ModelConfig, ToyModelParams, init_params, toy_shapes, train

TRAIN_SPEC = {"steps": 5000, "seed": 0, "batch_size": 64, "lr": 2e-3,
              "dataset_size": 4096, "dataset_seed": 1}
_SOURCES = ("tensor_kernel.py", "diffusion.py", "model.py")


def _cache_dir() -> Path:
    root = Path(os.environ.get("EMAG_LAB_TEST_CACHE", Path(__file__).parent / ".model_cache"))
    h = hashlib.sha256(json.dumps(TRAIN_SPEC, sort_keys=True).encode())
    pkg = Path(emag_lab.__file__).parent
    for name in _SOURCES:
        h.update((pkg / name).read_bytes())
    return root / h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_checkpoint() -> Path:
    """Checkpoint directory of an eps-mode class-conditional model trained 5000 steps."""
    d = _cache_dir()
    if not (d / "manifest.json").exists():
        data = toy_shapes(TRAIN_SPEC["dataset_size"], seed=TRAIN_SPEC["dataset_seed"])
        result = train(data, ModelConfig(), steps=TRAIN_SPEC["steps"], seed=TRAIN_SPEC["seed"],
                       batch_size=TRAIN_SPEC["batch_size"], lr=TRAIN_SPEC["lr"], log_every=1000)
        result.params.save(d, extra={"train": TRAIN_SPEC, "losses": result.losses})
    return d


@pytest.fixture(scope="session")
def trained_model(trained_checkpoint) -> ToyModelParams:
    return ToyModelParams.load(trained_checkpoint)


@pytest.fixture(scope="session")
def random_model() -> ToyModelParams:
    return init_params(ModelConfig(), seed=3)


@pytest.fixture(scope="session")
def joint_model() -> ToyModelParams:
    return init_params(ModelConfig(joint=True), seed=4)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20261017)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{n:>2} {detail}")
