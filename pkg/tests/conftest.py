import os
import sys

import numpy as np
import pytest
import torch

# Add root to path, same as verify.py
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from modules.fixtures import build_reference_setup, reference_config, toy_config  # noqa: E402
from modules.scene import Camera, GaussianSplat, Scene  # noqa: E402
from modules.text_embed import init_pseudo_token  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long calibration runs on the full reference setup")


def pytest_collection_modifyitems(config, items):
    # slow runs only when selected explicitly, e.g. `pytest -m slow`
    if "slow" in (config.getoption("markexpr") or ""):
        return
    skip = pytest.mark.skip(reason="calibration run; select with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def toy():
    """Trained toy setup (16x16 views, tiny denoiser). Shared read-only by every test."""
    return build_reference_setup(toy_config())


@pytest.fixture(scope="session")
def reference():
    """Trained reference setup from configs/reference.yaml, for the slow calibration runs."""
    return build_reference_setup(reference_config())


@pytest.fixture
def toy_token(toy):
    inv = toy.config.inversion
    return init_pseudo_token(inv.init_word, inv.num_vectors, toy.vocab, name=inv.token_name)


def unit(q):
    q = np.asarray(q, dtype=float)
    return tuple(q / np.linalg.norm(q))


@pytest.fixture
def three_splats():
    """Three splats at clearly separated depths."""
    return Scene(splats=(
        GaussianSplat((0.0, 0.0, 0.0), (0.25, 0.15, 0.2), unit((0.95, 0.1, 0.2, 0.2)), (0.7, 0.3, 0.2), 0.5),
        GaussianSplat((0.2, 0.1, 0.45), (0.2, 0.2, 0.1), unit((0.9, -0.3, 0.1, 0.3)), (0.2, 0.6, 0.3), 0.4),
        GaussianSplat((-0.25, -0.1, -0.45), (0.3, 0.2, 0.25), (1.0, 0.0, 0.0, 0.0), (0.3, 0.3, 0.6), 0.6),
    ), background=(0.1, 0.1, 0.1))


@pytest.fixture
def side_camera():
    return Camera(azimuth=30.0, elevation=10.0, radius=2.0, resolution=(15, 17))


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
