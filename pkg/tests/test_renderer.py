"""
Tests for quadrature rendering, bbox clipping and PPM I/O.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from radloc.core.geometry import CameraIntrinsics, Pose, Ray
from radloc.core.radiance_field import VoxelGrid
from radloc.core.renderer import (
    Image,
    RaySamplingConfig,
    composite,
    intersect_bbox,
    load_ppm,
    render_image,
    render_pixels,
    render_ray,
    render_rays,
    sample_depths,
    save_ppm,
    transmittance_direct,
)
from radloc.errors import PreconditionError

pytestmark = pytest.mark.unit


def transmittance_recurrence(sigmas: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    trans = np.empty_like(sigmas)
    t = 1.0
    for k in range(len(sigmas)):
        trans[k] = t
        t *= math.exp(-sigmas[k] * deltas[k])
    return trans


class TestComposite:
    def test_recurrence_matches_direct(self, rng: np.random.Generator) -> None:
        for _ in range(1000):
            n = int(rng.integers(1, 64))
            sigmas = rng.exponential(2.0, n)
            deltas = rng.uniform(0.001, 0.1, n)
            direct = transmittance_direct(sigmas, deltas)
            assert np.allclose(direct, transmittance_recurrence(sigmas, deltas), rtol=0.0, atol=1e-12)

    def test_opacity_bounded(self, rng: np.random.Generator) -> None:
        sigmas = rng.exponential(50.0, (500, 64))
        deltas = rng.uniform(0.0, 0.2, (500, 64))
        colors = rng.uniform(0.0, 1.0, (500, 64, 3))
        out = composite(sigmas, deltas, colors)
        assert np.all(out.opacity <= 1.0 + 1e-6)
        assert np.all(out.weights >= 0.0)
        assert np.all((out.rgb >= 0.0) & (out.rgb <= 1.0))

    def test_infinite_density_is_opaque(self) -> None:
        out = composite([np.inf, 1.0], [0.1, 0.1], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert np.allclose(out.rgb[0], [1.0, 0.0, 0.0])
        assert out.transmittance[0, 1] == 0.0

    def test_large_finite_density_occludes(self) -> None:
        out = composite([50.0, 1.0], [1.0, 0.1], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert np.allclose(out.rgb[0], [1.0, 0.0, 0.0], rtol=0.0, atol=1e-15)
        assert out.transmittance[0, 1] == pytest.approx(math.exp(-50.0))

    def test_half_opacity_sample_in_front_of_opaque_one(self) -> None:
        out = composite([math.log(2.0), 1e6], [1.0, 1.0], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert np.allclose(out.alpha[0], [0.5, 1.0])
        assert np.allclose(out.transmittance[0], [1.0, 0.5])
        assert np.allclose(out.weights[0], [0.5, 0.5])
        assert np.allclose(out.rgb[0], [0.5, 0.5, 0.0])

    def test_opacity_monotone_in_each_density(self, rng: np.random.Generator) -> None:
        for _ in range(500):
            n = int(rng.integers(1, 32))
            sigmas = rng.exponential(3.0, n)
            deltas = rng.uniform(0.001, 0.2, n)
            colors = rng.uniform(0.0, 1.0, (n, 3))
            before = composite(sigmas, deltas, colors).opacity[0]
            bumped = sigmas.copy()
            bumped[rng.integers(0, n)] += rng.exponential(5.0)
            after = composite(bumped, deltas, colors).opacity[0]
            assert after >= before - 1e-12

    def test_zero_density_is_black(self) -> None:
        out = composite(np.zeros(10), np.full(10, 0.1), np.ones((10, 3)))
        assert np.array_equal(out.rgb[0], [0.0, 0.0, 0.0])


class TestRaySampling:
    def test_midpoints(self) -> None:
        t, deltas = sample_depths(np.array([0.0]), np.array([1.0]), 4)
        assert np.allclose(t, [[0.125, 0.375, 0.625, 0.875]])
        assert np.allclose(deltas, [[0.25, 0.25, 0.25, 0.25]])

    def test_bbox_intersection(self) -> None:
        entry, exit_ = intersect_bbox(
            np.array([[-3.0, 0.0, 0.0], [-3.0, 5.0, 0.0]]),
            np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            np.array([-1.0, -1.0, -1.0]),
            np.array([1.0, 1.0, 1.0]),
        )
        assert entry[0] == 2.0 and exit_[0] == 4.0
        assert exit_[1] < entry[1]

    def test_config_validates_interval(self) -> None:
        with pytest.raises(ValueError):
            RaySamplingConfig(t_near=2.0, t_far=1.0)

    def test_stratified_needs_rng(self, empty_grid: VoxelGrid) -> None:
        cfg = RaySamplingConfig(stratified=True)
        with pytest.raises(PreconditionError):
            render_ray(empty_grid, Ray((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)), cfg)


class TestRender:
    def test_homogeneous_closed_form(self) -> None:
        sigma, color, length = 1.5, np.array([0.2, 0.6, 0.9]), 1.0
        grid = VoxelGrid.uniform((4, 4, 4), (-2.0, -2.0, -2.0), (2.0, 2.0, 2.0), sigma, tuple(color))
        cfg = RaySamplingConfig(t_near=0.0, t_far=length, n_samples=256)
        rgb = render_ray(grid, Ray((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)), cfg)
        expected = color * (1.0 - math.exp(-sigma * length))
        assert np.allclose(rgb, expected, rtol=0.01)

    def test_error_shrinks_with_more_samples(self) -> None:
        # density and color both ramp linearly from 0 along the ray
        density = np.array([0.0, 4.0]).reshape(2, 1, 1)
        color = np.array([[0.0] * 3, [1.0] * 3]).reshape(2, 1, 1, 3)
        grid = VoxelGrid(density, color, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        slope, length = 8.0, 0.5
        expected, _ = quad(lambda t: math.exp(-slope * t * t / 2.0) * slope * t * (t / length), 0.0, length)
        ray = Ray((0.25, 0.5, 0.5), (1.0, 0.0, 0.0))
        errors = [
            abs(render_ray(grid, ray, RaySamplingConfig(t_near=0.0, t_far=length, n_samples=n))[0] - expected)
            for n in (4, 8, 16, 32, 64)
        ]
        assert all(b < a for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 1e-3

    def test_large_finite_density_wall(self) -> None:
        density = np.array([200.0, 200.0, 0.0, 0.0]).reshape(4, 1, 1)
        color = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).reshape(4, 1, 1, 3)
        grid = VoxelGrid(density, color, (0.0, 0.0, 0.0), (4.0, 1.0, 1.0))
        rgb = render_ray(grid, Ray((-1.0, 0.5, 0.5), (1.0, 0.0, 0.0)), RaySamplingConfig(n_samples=64))
        assert np.allclose(rgb, [1.0, 0.0, 0.0], rtol=0.0, atol=1e-9)

    def test_stratified_homogeneous(self, rng: np.random.Generator) -> None:
        grid = VoxelGrid.uniform((4, 4, 4), (-2.0, -2.0, -2.0), (2.0, 2.0, 2.0), 2.0, (1.0, 1.0, 1.0))
        cfg = RaySamplingConfig(t_near=0.0, t_far=1.0, n_samples=256, stratified=True)
        rgb = render_ray(grid, Ray((0.0, 0.0, 0.0), (0.0, 1.0, 0.0)), cfg, rng)
        assert np.allclose(rgb, 1.0 - math.exp(-2.0), rtol=0.01)

    def test_miss_is_black(self, scene_grid: VoxelGrid) -> None:
        cfg = RaySamplingConfig(n_samples=32)
        rgb = render_ray(scene_grid, Ray((5.0, 5.0, 5.0), (1.0, 0.0, 0.0)), cfg)
        assert np.array_equal(rgb, [0.0, 0.0, 0.0])

    def test_zero_density_image_is_black(self, empty_grid: VoxelGrid, camera_pose: Pose, small_intr: CameraIntrinsics) -> None:
        image = render_image(empty_grid, camera_pose, small_intr, RaySamplingConfig(n_samples=16))
        assert image.pixels.shape == (small_intr.height, small_intr.width, 3)
        assert not np.any(image.pixels)

    def test_scene_is_visible(self, scene_grid: VoxelGrid, camera_pose: Pose, small_intr: CameraIntrinsics) -> None:
        image = render_image(scene_grid, camera_pose, small_intr, RaySamplingConfig(n_samples=32))
        assert image.pixels.max() > 0.1

    def test_pixels_match_image(self, scene_grid: VoxelGrid, camera_pose: Pose, small_intr: CameraIntrinsics) -> None:
        cfg = RaySamplingConfig(n_samples=32)
        image = render_image(scene_grid, camera_pose, small_intr, cfg)
        coords = [(0, 0), (7, 5), (15, 11), (3, 9)]
        samples = render_pixels(scene_grid, camera_pose, small_intr, coords, cfg)
        assert [s.coordinate for s in samples] == coords
        for s in samples:
            u, v = s.coordinate
            assert np.allclose(s.color, image.pixels[v, u], atol=1e-12)

    def test_full_resolution_image(self, scene_grid: VoxelGrid, camera_pose: Pose) -> None:
        intr = CameraIntrinsics.from_fov(160, 120, 60.0)
        cfg = RaySamplingConfig(n_samples=16)
        image = render_image(scene_grid, camera_pose, intr, cfg, workers=2)
        assert image.pixels.shape == (120, 160, 3)
        assert (image.width, image.height) == (160, 120)
        coords = [(0, 0), (159, 0), (0, 119), (159, 119), (100, 30), (30, 100)]
        for s in render_pixels(scene_grid, camera_pose, intr, coords, cfg):
            u, v = s.coordinate
            assert np.allclose(s.color, image.pixels[v, u], atol=1e-12)

    def test_out_of_raster_pixel(self, scene_grid: VoxelGrid, camera_pose: Pose, small_intr: CameraIntrinsics) -> None:
        with pytest.raises(PreconditionError):
            render_pixels(scene_grid, camera_pose, small_intr, [(16, 0)], RaySamplingConfig(n_samples=8))

    def test_worker_count_does_not_change_result(
        self, scene_grid: VoxelGrid, camera_pose: Pose, small_intr: CameraIntrinsics, monkeypatch
    ) -> None:
        monkeypatch.setattr("settings.CHUNK_RAYS", 17)
        cfg = RaySamplingConfig(n_samples=24, stratified=True)
        a = render_image(scene_grid, camera_pose, small_intr, cfg, np.random.default_rng(3), workers=1)
        b = render_image(scene_grid, camera_pose, small_intr, cfg, np.random.default_rng(3), workers=4)
        assert np.array_equal(a.pixels, b.pixels)

    def test_render_rays_empty(self, scene_grid: VoxelGrid) -> None:
        out = render_rays(scene_grid, np.zeros((0, 3)), np.zeros((0, 3)), RaySamplingConfig())
        assert out.shape == (0, 3)


class TestPpm:
    def test_round_trip_quantized(self, tmp_path, rng: np.random.Generator) -> None:
        image = Image(rng.uniform(0.0, 1.0, (6, 5, 3)))
        path = tmp_path / "img.ppm"
        save_ppm(image, path)
        assert path.read_bytes().startswith(b"P6")
        loaded = load_ppm(path)
        assert np.array_equal(loaded.quantized(), image.quantized())
        assert np.allclose(loaded.pixels, image.pixels, atol=0.5 / 255 + 1e-12)

    def test_repeat_save_identical(self, tmp_path, scene_grid: VoxelGrid, camera_pose: Pose, small_intr: CameraIntrinsics) -> None:
        cfg = RaySamplingConfig(n_samples=16)
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        save_ppm(render_image(scene_grid, camera_pose, small_intr, cfg), a)
        save_ppm(render_image(scene_grid, camera_pose, small_intr, cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_image_validates_range(self) -> None:
        with pytest.raises(PreconditionError):
            Image(np.full((2, 2, 3), 1.5))
