from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from shapetokens.backends import make_toy_suite
from shapetokens.dataset import build_dataset
from shapetokens.geometry import PointCloud, save_cloud

TRAIN_BANK = (
    "a photograph of a [SHAPE-ID]",
    "a detailed sketch of a [SHAPE-ID]",
)


def make_ball_and_pole(seed: int = 7, n: int = 600) -> tuple[np.ndarray, np.ndarray]:
    """Two desk-scale test clouds with very different silhouettes.

    Both are rotationally symmetric about z, so every turntable view of a
    shape looks the same: a solid ball (large round silhouette) and a thin
    vertical pole (narrow bar). One generator feeds both so the pair is a
    single deterministic artifact.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ball = v * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    z = rng.uniform(-1, 1, n)
    r = rng.uniform(0, 0.06, n)
    theta = rng.uniform(0, 2 * np.pi, n)
    pole = np.c_[r * np.cos(theta), r * np.sin(theta), z]
    return ball, pole


@pytest.fixture(scope="session")
def toy_suite():
    return make_toy_suite(0)


@pytest.fixture(scope="session")
def shape_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("shapes")
    ball, pole = make_ball_and_pole()
    save_cloud(PointCloud(ball), root / "ball_01.xyz")
    save_cloud(PointCloud(pole), root / "pole_01.xyz")
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, shape_dir, toy_suite) -> Path:
    """2 shapes x 30 views with a 2-template bank; returns the manifest path."""
    out = tmp_path_factory.mktemp("dataset")
    result = build_dataset(shape_dir, list(TRAIN_BANK), out, toy_suite, seed=0)
    return result.manifest_path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay the acceptance PASS/FAIL lines after capture is torn down."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
