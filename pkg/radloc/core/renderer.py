"""
Quadrature volume rendering of a VoxelGrid.

For samples t_1 < ... < t_n along a ray with spacings delta_k (the last one
equal to the bin width):

    alpha_k = 1 - exp(-sigma_k * delta_k)
    T_k     = exp(-sum_{k' < k} sigma_k' * delta_k')
    C       = sum_k T_k * alpha_k * c_k

Each ray is clipped to the grid's bounding box before sampling; rays that miss
it render black.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from PIL import Image as PILImage
from pydantic import BaseModel, ConfigDict, Field, model_validator

from radloc.core.geometry import CameraIntrinsics, FloatArray, Pose, Ray, rays_for_pixels
from radloc.core.parallel import chunk_slices, ordered_map
from radloc.core.radiance_field import VoxelGrid, sample_field_batch
from radloc.errors import PreconditionError
from settings import logger


class RaySamplingConfig(BaseModel):
    """
    Sample placement along each ray. The interval [t_near, t_far] is further
    clipped to the grid's bounding box.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    t_near: float = Field(default=0.0, ge=0.0)
    t_far: float = 100.0
    n_samples: int = Field(default=128, ge=1)
    stratified: bool = False

    @model_validator(mode="after")
    def _ordered(self) -> "RaySamplingConfig":
        if not self.t_near < self.t_far:
            raise ValueError(f"t_near ({self.t_near}) must be < t_far ({self.t_far})")
        return self


@dataclass(frozen=True, eq=False)
class Image:
    """
    Row-major RGB raster with float channels in [0, 1], shaped (height, width, 3).
    """

    pixels: FloatArray

    def __post_init__(self) -> None:
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or min(px.shape[:2]) < 1:
            raise PreconditionError(f"image must be (h, w, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or np.any((px < 0) | (px > 1)):
            raise PreconditionError("image channels must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    def at(self, coords: npt.ArrayLike) -> FloatArray:
        """
        :param coords: (n,2) integer (u, v) coordinates.
        :return: (n,3) colors.
        """
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        return self.pixels[c[:, 1], c[:, 0]]

    def quantized(self) -> npt.NDArray[np.uint8]:
        """
        8-bit linear quantization, round(channel * 255).
        """
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def matches(self, intr: CameraIntrinsics) -> bool:
        return self.width == intr.width and self.height == intr.height


@dataclass(frozen=True, eq=False)
class PixelSample:
    coordinate: Tuple[int, int]
    color: FloatArray = field(default_factory=lambda: np.zeros(3))


class Composite(NamedTuple):
    """
    Per-ray compositing outputs.
    rgb (r,3); weights T*alpha (r,n); transmittance T (r,n); alpha (r,n); opacity (r,).
    """

    rgb: FloatArray
    weights: FloatArray
    transmittance: FloatArray
    alpha: FloatArray
    opacity: FloatArray


def transmittance_direct(sigmas: FloatArray, deltas: FloatArray) -> FloatArray:
    """
    T_k = exp(-sum_{k'<k} sigma_k' delta_k'), with T_1 = 1.
    :param sigmas: (..., n)
    :param deltas: (..., n)
    """
    optical = np.cumsum(sigmas * deltas, axis=-1)
    exclusive = np.zeros_like(optical)
    exclusive[..., 1:] = optical[..., :-1]
    return np.exp(-exclusive)


def composite(sigmas: npt.ArrayLike, deltas: npt.ArrayLike, colors: npt.ArrayLike) -> Composite:
    """
    Composite samples front to back.
    :param sigmas: (r,n) or (n,) densities.
    :param deltas: Same shape, sample spacings.
    :param colors: (r,n,3) or (n,3).
    :return: Composite with the ray axis kept (r=1 for 1D input).
    """
    s = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    d = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    c = np.asarray(colors, dtype=np.float64).reshape(s.shape + (3,))
    alpha = -np.expm1(-s * d)
    trans = transmittance_direct(s, d)
    weights = trans * alpha
    rgb = np.clip(np.einsum("rn,rnj->rj", weights, c), 0.0, 1.0)
    return Composite(rgb, weights, trans, alpha, weights.sum(axis=-1))


def intersect_bbox(
    origins: FloatArray, directions: FloatArray, bmin: FloatArray, bmax: FloatArray
) -> Tuple[FloatArray, FloatArray]:
    """
    Slab test.
    :return: entry and exit distances (r,); exit < entry for misses.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bmin - origins) * inv
        t1 = (bmax - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # 0 * inf: origin on a slab plane with a parallel direction, unbounded on that axis
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    return lo.max(axis=1), hi.min(axis=1)


def sample_depths(
    near: FloatArray,
    far: FloatArray,
    n_samples: int,
    jitter: Optional[FloatArray] = None,
) -> Tuple[FloatArray, FloatArray]:
    """
    Uniform bins over [near, far] per ray; midpoints, or jittered within bins.
    :param jitter: Optional (r, n) uniforms in [0,1) (stratified sampling).
    :return: depths (r,n) and spacings (r,n), the last spacing equal to the bin width.
    """
    width = (far - near) / n_samples
    offsets = np.arange(n_samples, dtype=np.float64)[None, :]
    offsets = offsets + (0.5 if jitter is None else jitter)
    t = near[:, None] + offsets * width[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = width
    return t, deltas


def _render_chunk(
    grid: VoxelGrid,
    origins: FloatArray,
    directions: FloatArray,
    cfg: RaySamplingConfig,
    jitter: Optional[FloatArray],
) -> FloatArray:
    rgb = np.zeros((len(origins), 3))
    entry, exit_ = intersect_bbox(origins, directions, grid.bbox_min, grid.bbox_max)
    near = np.maximum(entry, cfg.t_near)
    far = np.minimum(exit_, cfg.t_far)
    hit = far > near
    if not np.any(hit):
        return rgb
    t, deltas = sample_depths(
        near[hit], far[hit], cfg.n_samples, None if jitter is None else jitter[hit]
    )
    points = origins[hit, None, :] + t[..., None] * directions[hit, None, :]
    sigmas, colors = sample_field_batch(grid, points.reshape(-1, 3))
    out = composite(
        sigmas.reshape(t.shape), deltas, colors.reshape(t.shape + (3,))
    )
    rgb[hit] = out.rgb
    return rgb


def render_rays(
    grid: VoxelGrid,
    origins: FloatArray,
    directions: FloatArray,
    cfg: RaySamplingConfig,
    rng: Optional[np.random.Generator] = None,
    workers: Optional[int] = None,
) -> FloatArray:
    """
    Render a batch of rays.

    Stratified jitter is drawn for all rays up front, and rays are processed in
    fixed-size chunks, so results do not depend on the worker count.
    :raises PreconditionError: If cfg.stratified and rng is None.
    :return: (r,3) colors in [0,1].
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if cfg.stratified and rng is None:
        raise PreconditionError("stratified sampling requires a random source")
    jitter = rng.random((len(o), cfg.n_samples)) if cfg.stratified and rng is not None else None
    slices = chunk_slices(len(o))
    parts = ordered_map(
        lambda s: _render_chunk(grid, o[s], d[s], cfg, None if jitter is None else jitter[s]),
        slices,
        workers,
    )
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))


def render_ray(
    grid: VoxelGrid,
    ray: Ray,
    cfg: RaySamplingConfig,
    rng: Optional[np.random.Generator] = None,
) -> FloatArray:
    """
    Render one ray.
    :return: (3,) RGB in [0,1].
    """
    return render_rays(grid, ray.origin[None, :], ray.direction[None, :], cfg, rng, 1)[0]


def render_pixel_colors(
    grid: VoxelGrid,
    pose: Pose,
    intr: CameraIntrinsics,
    coords: npt.ArrayLike,
    cfg: RaySamplingConfig,
    rng: Optional[np.random.Generator] = None,
    workers: Optional[int] = None,
) -> FloatArray:
    """
    Array form of render_pixels.
    :return: (n,3) colors in input order.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if len(c) == 0:
        return np.zeros((0, 3))
    origins, dirs = rays_for_pixels(intr, pose, c)
    return render_rays(grid, origins, dirs, cfg, rng, workers)


def render_pixels(
    grid: VoxelGrid,
    pose: Pose,
    intr: CameraIntrinsics,
    coords: Sequence[Tuple[int, int]],
    cfg: RaySamplingConfig,
    rng: Optional[np.random.Generator] = None,
    workers: Optional[int] = None,
) -> List[PixelSample]:
    """
    Render a subset of pixels of the view from pose.
    :raises PreconditionError: If a coordinate lies outside the raster.
    :return: One PixelSample per coordinate, in input order.
    """
    colors = render_pixel_colors(grid, pose, intr, coords, cfg, rng, workers)
    return [
        PixelSample((int(u), int(v)), colors[n]) for n, (u, v) in enumerate(coords)
    ]


def render_image(
    grid: VoxelGrid,
    pose: Pose,
    intr: CameraIntrinsics,
    cfg: RaySamplingConfig,
    rng: Optional[np.random.Generator] = None,
    workers: Optional[int] = None,
) -> Image:
    """
    Render the full raster.
    """
    coords = intr.all_coords()
    colors = render_pixel_colors(grid, pose, intr, coords, cfg, rng, workers)
    logger.debug(f"rendered {intr.width}x{intr.height} image, {cfg.n_samples} samples/ray")
    return Image(colors.reshape(intr.height, intr.width, 3))


def save_ppm(image: Image, path: Union[str, Path]) -> None:
    """
    Write a binary PPM (P6, maxval 255).
    """
    PILImage.fromarray(image.quantized()).save(path, format="PPM")


def load_ppm(path: Union[str, Path]) -> Image:
    """
    Read a PPM (or any Pillow-readable RGB image) into float channels.
    :raises OSError: If the file cannot be read or decoded.
    """
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return Image(arr / 255.0)
