"""
Explicit voxel radiance field: density and color on a regular grid over a box.

Voxel (i, j, k) has its center at bbox_min + (index + 0.5) * cell_size. Values
are trilinearly interpolated between centers; inside the box but beyond the
outermost centers the boundary voxels extend outward. Outside the box the
field is empty (zero density, black).
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from radloc.config import Triple, load_model, model_from_toml
from radloc.core.geometry import ArrayLike3, FloatArray, Vec3, as_vec3
from radloc.errors import GridFormatError, PreconditionError
from settings import logger

GRID_MAGIC = b"VXRF"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIII6d")

Dims = Tuple[int, int, int]
IntArray = npt.NDArray[np.int64]


def _readonly(arr: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """
    The map: per-cell density (1/m) and RGB color over an axis-aligned box.
    Arrays are float64, read-only, shaped (nx, ny, nz) and (nx, ny, nz, 3).
    """

    density: FloatArray
    color: FloatArray
    bbox_min: Vec3
    bbox_max: Vec3

    def __post_init__(self) -> None:
        density = np.array(self.density, dtype=np.float64)
        color = np.array(self.color, dtype=np.float64)
        if density.ndim != 3 or min(density.shape) < 1:
            raise PreconditionError(f"density must be a nonempty 3D array, got {density.shape}")
        if color.shape != density.shape + (3,):
            raise PreconditionError(
                f"color shape {color.shape} does not match density {density.shape}"
            )
        if not np.all(np.isfinite(density)) or np.any(density < 0):
            raise PreconditionError("densities must be finite and >= 0")
        if not np.all(np.isfinite(color)) or np.any((color < 0) | (color > 1)):
            raise PreconditionError("color channels must lie in [0, 1]")
        bmin, bmax = as_vec3(self.bbox_min), as_vec3(self.bbox_max)
        if np.any(bmin >= bmax):
            raise PreconditionError(f"bbox min {bmin} must be < max {bmax} per axis")
        object.__setattr__(self, "density", _readonly(density))
        object.__setattr__(self, "color", _readonly(color))
        object.__setattr__(self, "bbox_min", bmin)
        object.__setattr__(self, "bbox_max", bmax)

    @classmethod
    def uniform(
        cls,
        dims: Dims,
        bbox_min: ArrayLike3,
        bbox_max: ArrayLike3,
        density: float = 0.0,
        color: Triple = (0.0, 0.0, 0.0),
    ) -> "VoxelGrid":
        _check_dims(dims)
        return cls(
            np.full(dims, density, dtype=np.float64),
            np.broadcast_to(np.asarray(color, dtype=np.float64), tuple(dims) + (3,)),
            as_vec3(bbox_min),
            as_vec3(bbox_max),
        )

    @property
    def dims(self) -> Dims:
        nx, ny, nz = self.density.shape
        return nx, ny, nz

    @property
    def num_cells(self) -> int:
        return int(self.density.size)

    @property
    def cell_size(self) -> Vec3:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.dims, dtype=np.float64)

    def voxel_center(self, index: Tuple[int, int, int]) -> Vec3:
        return self.bbox_min + (np.asarray(index, dtype=np.float64) + 0.5) * self.cell_size

    def cell_centers(self) -> FloatArray:
        """
        :return: (nx, ny, nz, 3) array of voxel centers.
        """
        axes = [
            self.bbox_min[a] + (np.arange(n) + 0.5) * self.cell_size[a]
            for a, n in enumerate(self.dims)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def storable(self) -> "VoxelGrid":
        """
        Copy with density and color rounded to float32, the precision save_grid
        writes, so that save_grid then load_grid gives back an equal grid.
        """
        return VoxelGrid(
            self.density.astype(np.float32).astype(np.float64),
            self.color.astype(np.float32).astype(np.float64),
            self.bbox_min,
            self.bbox_max,
        )

    def equals(self, other: "VoxelGrid") -> bool:
        """
        Field-by-field exact equality.
        """
        return bool(
            np.array_equal(self.density, other.density)
            and np.array_equal(self.color, other.color)
            and np.array_equal(self.bbox_min, other.bbox_min)
            and np.array_equal(self.bbox_max, other.bbox_max)
        )


def _check_dims(dims: Tuple[int, ...]) -> None:
    if len(dims) != 3 or any(int(n) < 1 for n in dims):
        raise PreconditionError(f"grid dims must be three positive integers, got {dims}")


def trilinear_stencil(
    grid: VoxelGrid, points: npt.ArrayLike
) -> Tuple[IntArray, FloatArray, npt.NDArray[np.bool_]]:
    """
    Interpolation stencil of many points.
    :param grid: The voxel grid.
    :param points: (m,3) world points.
    :return: flat C-order cell indices (m,8), weights (m,8) and an inside mask (m,).
        Weights of points outside the box are zero.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(grid.dims)
    inside = np.all((p >= grid.bbox_min) & (p <= grid.bbox_max), axis=1)
    g = (p - grid.bbox_min) / grid.cell_size - 0.5
    g = np.clip(g, 0.0, dims - 1)
    base = np.minimum(np.floor(g).astype(np.int64), np.maximum(dims - 2, 0))
    frac = g - base
    upper = np.minimum(base + 1, dims - 1)

    nx_, ny, nz = grid.dims
    idx = np.empty((len(p), 8), dtype=np.int64)
    wts = np.empty((len(p), 8), dtype=np.float64)
    corner = 0
    for dx in (0, 1):
        ix = upper[:, 0] if dx else base[:, 0]
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            iy = upper[:, 1] if dy else base[:, 1]
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                iz = upper[:, 2] if dz else base[:, 2]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                idx[:, corner] = (ix * ny + iy) * nz + iz
                wts[:, corner] = wx * wy * wz
                corner += 1
    wts[~inside] = 0.0
    return idx, wts, inside


def sample_field_batch(
    grid: VoxelGrid, points: npt.ArrayLike
) -> Tuple[FloatArray, FloatArray]:
    """
    Trilinear density and color at many points.
    :return: sigmas (m,), rgbs (m,3). Points outside the box give (0, black).
    """
    idx, wts, _ = trilinear_stencil(grid, points)
    sigmas = np.einsum("mc,mc->m", wts, grid.density.reshape(-1)[idx])
    rgbs = np.einsum("mc,mcj->mj", wts, grid.color.reshape(-1, 3)[idx])
    return sigmas, rgbs


def sample_field(
    grid: VoxelGrid, point: ArrayLike3, direction: ArrayLike3
) -> Tuple[float, FloatArray]:
    """
    Density and color at one point. Color is view-independent; direction is
    accepted so a view-dependent field can slot in without an interface change.
    :raises PreconditionError: If direction is not unit length.
    :return: (sigma, rgb)
    """
    d = as_vec3(direction)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-6:
        raise PreconditionError("sample direction must be unit length")
    sigmas, rgbs = sample_field_batch(grid, as_vec3(point)[None, :])
    return float(sigmas[0]), rgbs[0]


class Primitive(BaseModel):
    """
    A solid sphere or box with constant density and color.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    shape: Literal["sphere", "box"]
    density: float = Field(ge=0.0)
    color: Triple
    center: Optional[Triple] = None
    radius: Optional[float] = Field(default=None, gt=0.0)
    min: Optional[Triple] = None
    max: Optional[Triple] = None

    @field_validator("color")
    @classmethod
    def _color_range(cls, value: Triple) -> Triple:
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError("color channels must lie in [0, 1]")
        return value

    @model_validator(mode="after")
    def _shape_fields(self) -> "Primitive":
        if self.shape == "sphere":
            if self.center is None or self.radius is None:
                raise ValueError("sphere needs center and radius")
        else:
            if self.min is None or self.max is None:
                raise ValueError("box needs min and max")
            if any(lo >= hi for lo, hi in zip(self.min, self.max)):
                raise ValueError("box min must be < max per axis")
        return self

    def extent(self) -> Tuple[FloatArray, FloatArray]:
        if self.shape == "sphere":
            assert self.center is not None and self.radius is not None
            c = np.asarray(self.center)
            return c - self.radius, c + self.radius
        assert self.min is not None and self.max is not None
        return np.asarray(self.min), np.asarray(self.max)

    def contains(self, points: FloatArray) -> npt.NDArray[np.bool_]:
        """
        :param points: (..., 3) points.
        :return: Boolean membership mask.
        """
        if self.shape == "sphere":
            assert self.center is not None and self.radius is not None
            d2 = np.sum((points - np.asarray(self.center)) ** 2, axis=-1)
            return d2 <= self.radius**2
        lo, hi = self.extent()
        return np.all((points >= lo) & (points <= hi), axis=-1)


class SceneSpec(BaseModel):
    """
    A procedural scene: a bounding box, an optional background medium and an
    ordered list of primitives (later ones overwrite earlier ones).

    TOML form::

        bbox_min = [-1.0, -1.0, -1.0]
        bbox_max = [1.0, 1.0, 1.0]
        background_density = 0.0
        background_color = [0.0, 0.0, 0.0]

        [[primitives]]
        shape = "sphere"
        center = [0.0, 0.0, 0.0]
        radius = 0.5
        density = 40.0
        color = [0.9, 0.2, 0.1]

        [[primitives]]
        shape = "box"
        min = [-0.8, -0.8, -1.0]
        max = [0.8, 0.8, -0.7]
        density = 40.0
        color = [0.2, 0.6, 0.3]
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    bbox_min: Triple
    bbox_max: Triple
    background_density: float = Field(default=0.0, ge=0.0)
    background_color: Triple = (0.0, 0.0, 0.0)
    primitives: List[Primitive] = Field(default_factory=list)

    @model_validator(mode="after")
    def _within_bbox(self) -> "SceneSpec":
        lo, hi = np.asarray(self.bbox_min), np.asarray(self.bbox_max)
        if np.any(lo >= hi):
            raise ValueError("bbox_min must be < bbox_max per axis")
        if any(not 0.0 <= c <= 1.0 for c in self.background_color):
            raise ValueError("background_color channels must lie in [0, 1]")
        for n, prim in enumerate(self.primitives):
            p_lo, p_hi = prim.extent()
            if np.any(p_lo < lo - 1e-12) or np.any(p_hi > hi + 1e-12):
                raise ValueError(f"primitive {n} extends outside the bbox")
        return self

    @classmethod
    def from_toml(cls, text: str, source: str = "") -> "SceneSpec":
        return model_from_toml(cls, text, source)


def load_scene_spec(path: Union[str, Path]) -> SceneSpec:
    """
    :raises ConfigError: With the offending line on syntax or validation errors.
    """
    return load_model(SceneSpec, path)


def build_procedural_scene(spec: SceneSpec, dims: Dims) -> VoxelGrid:
    """
    Voxelize a scene by testing each cell center against the primitives in order.
    Values are rounded to float32 so the grid survives a save/load round trip exactly.
    :raises PreconditionError: On non-positive dims.
    """
    _check_dims(dims)
    nx, ny, nz = (int(n) for n in dims)
    bmin = np.asarray(spec.bbox_min, dtype=np.float64)
    bmax = np.asarray(spec.bbox_max, dtype=np.float64)
    cell = (bmax - bmin) / np.array([nx, ny, nz], dtype=np.float64)
    axes = [bmin[a] + (np.arange(n) + 0.5) * cell[a] for a, n in enumerate((nx, ny, nz))]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    density = np.full((nx, ny, nz), spec.background_density, dtype=np.float64)
    color = np.empty((nx, ny, nz, 3), dtype=np.float64)
    color[...] = spec.background_color
    for prim in spec.primitives:
        mask = prim.contains(centers)
        density[mask] = prim.density
        color[mask] = prim.color
    logger.debug(
        f"voxelized {len(spec.primitives)} primitives into {nx}x{ny}x{nz}, "
        f"{int(np.count_nonzero(density))} occupied cells"
    )
    return VoxelGrid(density, color, bmin, bmax).storable()


def save_grid(grid: VoxelGrid, path: Union[str, Path]) -> None:
    """
    Write the VXRF binary format: magic, u32 version, u32 nx, ny, nz, 6 f64 bbox,
    f32 densities then f32 RGB colors, x fastest then y then z, little-endian.
    """
    nx, ny, nz = grid.dims
    header = _HEADER.pack(
        GRID_MAGIC, GRID_VERSION, nx, ny, nz, *grid.bbox_min.tolist(), *grid.bbox_max.tolist()
    )
    density = grid.density.transpose(2, 1, 0).astype("<f4")
    color = grid.color.transpose(2, 1, 0, 3).astype("<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(density.tobytes(order="C"))
        f.write(color.tobytes(order="C"))


def load_grid(path: Union[str, Path]) -> VoxelGrid:
    """
    Read a VXRF file written by save_grid.
    :raises GridFormatError: On wrong magic, unsupported version, inconsistent
        length or out-of-range values.
    :raises OSError: On I/O failure.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GridFormatError(
            f"{path}: length inconsistent, header needs {_HEADER.size} bytes, file has {len(data)}"
        )
    magic, version, nx, ny, nz, *bbox = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise GridFormatError(
            f"{path}: bad magic {magic!r}, expected {GRID_MAGIC.decode()!r}"
        )
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}, expected {GRID_VERSION}")
    if min(nx, ny, nz) < 1:
        raise GridFormatError(f"{path}: invalid dims {nx}x{ny}x{nz}")
    cells = nx * ny * nz
    expected = _HEADER.size + 4 * cells + 12 * cells
    if len(data) != expected:
        raise GridFormatError(
            f"{path}: length inconsistent with dims {nx}x{ny}x{nz}: "
            f"expected {expected} bytes, found {len(data)}"
        )
    offset = _HEADER.size
    density = np.frombuffer(data, dtype="<f4", count=cells, offset=offset)
    color = np.frombuffer(data, dtype="<f4", count=3 * cells, offset=offset + 4 * cells)
    density = density.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    color = color.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).astype(np.float64)
    try:
        return VoxelGrid(density, color, np.asarray(bbox[:3]), np.asarray(bbox[3:]))
    except PreconditionError as exc:
        raise GridFormatError(f"{path}: {exc}") from exc
