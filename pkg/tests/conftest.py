import numba
import numpy as np
import pytest

from egoflow.geometry import CameraIntrinsics
from egoflow.synthetic import SceneSpec, generate_scene

numba.set_num_threads(min(2, numba.config.NUMBA_NUM_THREADS))


@pytest.fixture(scope="session")
def cam100():
    """Simple camera: f=100 px, 200x200, principal point at the center."""
    return CameraIntrinsics(focal_length=100.0, cx=99.5, cy=99.5,
                            width=200, height=200)


@pytest.fixture(scope="session")
def sparse_scene():
    """One 10%-density benchmark scene reused across tests."""
    return generate_scene(3, SceneSpec(density=0.10))


@pytest.fixture(scope="session")
def sparse_scenes():
    """A handful of 10%-density scenes."""
    spec = SceneSpec(density=0.10)
    return [generate_scene(s, spec) for s in range(6)]
