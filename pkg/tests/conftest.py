"""
Shared fixtures for the radloc test suite.
"""

import numpy as np
import pytest

from radloc.core.geometry import CameraIntrinsics, Pose, look_at
from radloc.core.radiance_field import Primitive, SceneSpec, VoxelGrid, build_procedural_scene

# Power-of-two cell sizes keep voxel-center arithmetic exact.
BBOX_MIN = (-1.0, -1.0, -1.0)
BBOX_MAX = (1.0, 1.0, 1.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_intr() -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(16, 12, 60.0)


@pytest.fixture
def scene_spec() -> SceneSpec:
    return SceneSpec(
        bbox_min=BBOX_MIN,
        bbox_max=BBOX_MAX,
        primitives=[
            Primitive(shape="box", min=(-1.0, -1.0, -1.0), max=(1.0, 1.0, -0.75), density=30.0, color=(0.6, 0.6, 0.5)),
            Primitive(shape="sphere", center=(0.3, 0.2, -0.3), radius=0.4, density=40.0, color=(0.9, 0.2, 0.1)),
            Primitive(shape="box", min=(-0.7, -0.5, -0.75), max=(-0.2, 0.0, 0.2), density=40.0, color=(0.2, 0.7, 0.3)),
        ],
    )


@pytest.fixture
def scene_grid(scene_spec: SceneSpec) -> VoxelGrid:
    return build_procedural_scene(scene_spec, (16, 16, 16))


@pytest.fixture
def empty_grid() -> VoxelGrid:
    return VoxelGrid.uniform((8, 8, 8), BBOX_MIN, BBOX_MAX)


@pytest.fixture
def camera_pose() -> Pose:
    return look_at((0.0, -3.0, 1.0), (0.0, 0.0, 0.0))
