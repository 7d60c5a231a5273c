"""
Tests for coarse candidate search and random view synthesis.
"""

import math

import numpy as np
import pytest

from radloc.core.field_fit import TrainSet
from radloc.core.geometry import CameraIntrinsics, Pose, look_at, orbit_poses, pose_error
from radloc.core.radiance_field import VoxelGrid
from radloc.core.renderer import RaySamplingConfig, render_image
from radloc.errors import PreconditionError
from radloc.services.initializer import (
    SearchConfig,
    augment_train_set,
    coarse_localize,
    lattice_candidates,
    rvs_perturb,
)

pytestmark = pytest.mark.unit


class TestSearchConfig:
    def test_needs_a_source(self) -> None:
        with pytest.raises(ValueError):
            SearchConfig()

    def test_zero_quaternion_rejected(self) -> None:
        with pytest.raises(ValueError):
            SearchConfig(candidates=((0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),))

    def test_from_poses_round_trip(self, camera_pose: Pose) -> None:
        cfg = SearchConfig.from_poses([camera_pose], m_pixels=8)
        [pose] = cfg.resolve(VoxelGrid.uniform((2, 2, 2), (-1, -1, -1), (1, 1, 1)))
        assert np.array_equal(pose.translation, camera_pose.translation)
        assert pose_error(pose, camera_pose).rotation_err < 1e-6

    def test_resolve_lattice(self, empty_grid: VoxelGrid) -> None:
        poses = SearchConfig(spacing=1.0, yaw_steps=4).resolve(empty_grid)
        assert len(poses) == 16


class TestLattice:
    def test_layout(self) -> None:
        poses = lattice_candidates((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 1.0, 4, height=0.5)
        assert len(poses) == 16
        assert np.allclose(poses[0].translation, [-0.5, -0.5, 0.5])
        assert np.allclose(poses[4].translation, [-0.5, 0.5, 0.5])
        assert all(p.translation[2] == 0.5 for p in poses)

    def test_first_heading_faces_center(self) -> None:
        poses = lattice_candidates((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 1.0, 4)
        forward = poses[0].rotation.rotate((0.0, 0.0, -1.0))
        assert np.allclose(forward, [1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0), 0.0])
        opposite = poses[2].rotation.rotate((0.0, 0.0, -1.0))
        assert np.allclose(opposite, -forward)

    def test_invalid_spacing(self) -> None:
        with pytest.raises(PreconditionError):
            lattice_candidates((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 0.0, 4)


class TestCoarseLocalize:
    @pytest.fixture
    def candidates(self) -> list:
        return orbit_poses((0.0, 0.0, 0.0), 3.0, 6, 1.0)

    def test_recovers_planted_pose(self, scene_grid, small_intr: CameraIntrinsics, candidates) -> None:
        truth = candidates[2]
        query = render_image(scene_grid, truth, small_intr, RaySamplingConfig(n_samples=32))
        cfg = SearchConfig.from_poses(candidates, m_pixels=64, n_samples=32)
        result = coarse_localize(scene_grid, query, small_intr, cfg)
        assert result.index == 2
        assert result.score < 1e-12
        assert pose_error(result.pose, truth).translation_err < 1e-12

    def test_single_candidate(self, scene_grid, small_intr, camera_pose) -> None:
        far = look_at((0.0, 3.0, 2.0), (0.0, 0.0, 0.0))
        query = render_image(scene_grid, camera_pose, small_intr, RaySamplingConfig(n_samples=16))
        result = coarse_localize(scene_grid, query, small_intr, SearchConfig.from_poses([far], m_pixels=16, n_samples=16))
        assert result.index == 0
        assert result.score > 0.0

    def test_ties_go_to_lower_index(self, scene_grid, small_intr, camera_pose) -> None:
        query = render_image(scene_grid, camera_pose, small_intr, RaySamplingConfig(n_samples=16))
        cfg = SearchConfig.from_poses([camera_pose, camera_pose], m_pixels=16, n_samples=16)
        assert coarse_localize(scene_grid, query, small_intr, cfg).index == 0

    def test_deterministic(self, scene_grid, small_intr, camera_pose, candidates) -> None:
        query = render_image(scene_grid, camera_pose, small_intr, RaySamplingConfig(n_samples=16))
        cfg = SearchConfig.from_poses(candidates, m_pixels=32, n_samples=16, seed=5)
        a = coarse_localize(scene_grid, query, small_intr, cfg)
        b = coarse_localize(scene_grid, query, small_intr, cfg, workers=3)
        assert (a.index, a.score) == (b.index, b.score)

    def test_too_many_pixels(self, scene_grid, small_intr, camera_pose) -> None:
        query = render_image(scene_grid, camera_pose, small_intr, RaySamplingConfig(n_samples=8))
        with pytest.raises(PreconditionError):
            coarse_localize(scene_grid, query, small_intr, SearchConfig.from_poses([camera_pose], m_pixels=500))


class TestRvs:
    def test_zero_radii_identity(self, rng) -> None:
        poses = orbit_poses((0.0, 0.0, 0.0), 3.0, 5, 1.0)
        assert rvs_perturb(poses, 0.0, 0.0, rng) == poses

    def test_within_radii(self, rng) -> None:
        poses = orbit_poses((0.0, 0.0, 0.0), 3.0, 200, 1.0)
        out = rvs_perturb(poses, 0.1, math.radians(15.0), rng)
        assert len(out) == len(poses)
        for src, dst in zip(poses, out):
            err = pose_error(src, dst)
            assert err.translation_err <= 0.1 + 1e-12
            assert err.rotation_err <= 15.0 + 1e-9

    def test_deterministic(self) -> None:
        poses = orbit_poses((0.0, 0.0, 0.0), 3.0, 5, 1.0)
        a = rvs_perturb(poses, 0.1, 0.2, np.random.default_rng(3))
        b = rvs_perturb(poses, 0.1, 0.2, np.random.default_rng(3))
        assert a == b

    def test_negative_radius(self, rng) -> None:
        with pytest.raises(PreconditionError):
            rvs_perturb([Pose.identity()], -0.1, 0.0, rng)

    def test_augment_train_set(self, scene_grid, small_intr, rng) -> None:
        poses = orbit_poses((0.0, 0.0, 0.0), 3.0, 2, 1.0)
        cfg = RaySamplingConfig(n_samples=8)
        train = TrainSet(tuple(render_image(scene_grid, p, small_intr, cfg) for p in poses), tuple(poses), small_intr)
        bigger = augment_train_set(scene_grid, train, 0.1, 0.1, rng, copies=2, sampling=cfg)
        assert len(bigger) == 6
        assert bigger.poses[:2] == train.poses
        with pytest.raises(PreconditionError):
            augment_train_set(scene_grid, train, 0.1, 0.1, rng, copies=-1)
