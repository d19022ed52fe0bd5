import numpy as np
import pytest

from rprr.geometry import Intrinsics
from rprr.scenes import Plane, SyntheticSceneSpec, gen_synthetic_scene, pose_from, relative_case


@pytest.fixture
def K_small():
    return Intrinsics.default(160, 120)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    """3 deg yaw, 5 cm sideways, in the default room at 160x120."""
    return gen_synthetic_scene(relative_case(3, 0, 0, (0.05, 0.0, 0.02), name="small"), 0)


@pytest.fixture(scope="session")
def pair_320():
    K = Intrinsics.default(320, 240)
    return gen_synthetic_scene(relative_case(3, 0, 0, (0.05, 0.0, 0.02), K, name="small320"), 0)


def plane_spec(K, z=1.0, yaw_deg=0.0, translation=(0, 0, 0)):
    """Textured fronto-parallel plane at ``z`` metres seen by a, b rotated/moved."""
    return SyntheticSceneSpec([Plane((0, 0, z), (0, 0, -1), (120, 140, 160))],
                              pose_from(), pose_from((0, yaw_deg, 0), translation), K,
                              name="plane")
