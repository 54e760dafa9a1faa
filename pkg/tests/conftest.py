import numpy as np
import pytest

from carmtwin.geometry import CArmState, make_intrinsics, projection_from_carm
from carmtwin.phantom import (
    build_synthetic_phantom,
    default_torso_phantom,
    default_vocabulary,
    load_phantom_spec,
)


@pytest.fixture(scope="session")
def torso():
    return default_torso_phantom()


@pytest.fixture(scope="session")
def torso_vocab(torso):
    return default_vocabulary(torso)


@pytest.fixture(scope="session")
def small_intrinsics():
    # 430 mm detector at 1 mm pitch: fast to render, same physical FOV
    return make_intrinsics(430, 1.0, 1200)


def small_state(alpha=0.0, beta=0.0, roll=0.0, isocenter=(0, 0, 0)):
    return CArmState(alpha=alpha, beta=beta, roll=roll, isocenter=np.asarray(isocenter, float))


@pytest.fixture(scope="session")
def ap_projection(small_intrinsics):
    return projection_from_carm(small_state(), small_intrinsics)


@pytest.fixture(scope="session")
def lateral_projection(small_intrinsics):
    return projection_from_carm(small_state(alpha=90), small_intrinsics)


@pytest.fixture(scope="session")
def sphere_volume():
    spec = load_phantom_spec(
        """
        name: sphere
        dims: [70, 70, 70]
        spacing_mm: [1.0, 1.0, 1.0]
        origin_mm: [-35, -35, -35]
        structures:
          - {label: ball, attenuation: 0.05, kind: ellipsoid, center: [0, 0, 0], radii: [30, 30, 30]}
        """
    )
    return build_synthetic_phantom(spec)
