import math

import numpy as np
import pytest
import torch

from specgs.color import BandTable
from specgs.raster import CameraView
from specgs.scene import DTYPE, SpectralScene, logit

torch.set_num_threads(1)

# criterion number -> summary line, filled by test_acceptance
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])


def random_scene(n=20, bands=(500.0, 600.0), classes=3, seed=0, env=(8, 16), levels=3, spread=0.5, scale=(0.1, 0.25)):
    """Small seeded scene with non-trivial appearance in every parameter group."""
    rng = np.random.default_rng(seed)
    bt = BandTable.from_centers(bands)
    B = len(bt)
    means = rng.uniform(-spread, spread, size=(n, 3))
    sc = SpectralScene.create(means, bt, classes, env[0], env[1], levels, seed=seed)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)  # noqa: E731
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return sc.replace(
        log_scales=t(np.log(rng.uniform(*scale, size=(n, 3)))),
        rotations=t(q),
        opacity_logits=logit(t(rng.uniform(0.3, 0.9, size=n))),
        normal_params=t(rng.normal(scale=0.2, size=(n, 2))),
        diffuse_logits=t(rng.normal(size=(B, n, 3))),
        specular_logits=t(rng.normal(size=(B, n, 3))),
        roughness_logits=t(rng.normal(size=(B, n))),
        encodings=t(rng.normal(size=(B, n, 16))),
        clf_weight=t(rng.normal(scale=0.5, size=(B, classes, 16))),
        clf_bias=t(rng.normal(scale=0.1, size=(B, classes))),
        env=t(rng.uniform(0.1, 1.0, size=(B, env[0], env[1], 3))),
        full_active=True,
        priors_initialized=True,
    )


def front_camera(size=16, eye=(0.2, 0.3, -2.0), fov_deg=50.0):
    return CameraView.look_at(eye, [0, 0, 0], [0, 1, 0], size, size, math.radians(fov_deg))


@pytest.fixture
def scene():
    return random_scene()


@pytest.fixture
def camera():
    return front_camera()
