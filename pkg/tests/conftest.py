from pathlib import Path

import numpy as np
import pytest

from voxelfuse.geom import Calibration, DepthBinSpec, GridSpec

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def kitti_calib_path() -> Path:
    return FIXTURES / "kitti_calib.txt"


@pytest.fixture
def pinhole() -> Calibration:
    """Forward +x optical axis, +y left, +z up, focal 3, principal point 0."""
    f = 3.0
    return Calibration(np.array([
        [0.0, -f, 0.0, 0.0],
        [0.0, 0.0, -f, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ]))


@pytest.fixture
def identity_calib() -> Calibration:
    """Optical axis along +z, focal 1, principal point at the origin."""
    return Calibration(np.hstack([np.eye(3), np.zeros((3, 1))]))


@pytest.fixture
def small_grid() -> GridSpec:
    return GridSpec(np.zeros(3), np.ones(3), (4, 4, 4))


@pytest.fixture
def bins_0_10_4() -> DepthBinSpec:
    return DepthBinSpec(0.0, 10.0, 4)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
