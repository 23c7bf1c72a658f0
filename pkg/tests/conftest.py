from __future__ import annotations

import sys

import numpy as np
import pytest

from splatexpr.scene import GaussianScene, logit, make_template, orbit_camera
from splatexpr.toy import toy_classifier


def random_scene(rng: np.random.Generator, n: int, spread: float = 0.6, scale=(-2.2, -1.2)) -> GaussianScene:
    """Splats scattered around the origin with moderate size and opacity."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=q,
        log_scales=rng.uniform(*scale, size=(n, 3)),
        opacity_logits=rng.uniform(-1.0, 2.0, size=n),
        colors=rng.uniform(-2.0, 2.0, size=(n, 3)),
        binding=np.zeros(n, dtype=np.int64),
    )


def single_splat(position=(0.0, 0.0, 0.0), log_scale=-1.5, opacity=0.9, color=(0.9, 0.2, 0.1),
                 rotation=(1.0, 0.0, 0.0, 0.0)) -> GaussianScene:
    return GaussianScene(np.array([position], dtype=float), np.array([rotation], dtype=float),
                         np.full((1, 3), float(log_scale)), np.array([logit(opacity)]),
                         logit(np.array([color], dtype=float)), np.zeros(1, dtype=np.int64))


@pytest.fixture
def front_camera():
    return orbit_camera((0.0, 0.0, 0.0), 3.0, 0.0, 0.0, size=32)


@pytest.fixture(scope="session")
def ico1():
    return make_template("icosphere", 1)


@pytest.fixture(scope="session")
def classifier():
    return toy_classifier(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
