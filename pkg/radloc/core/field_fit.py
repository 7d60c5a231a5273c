"""
Fitting a VoxelGrid to posed images by minimizing the photometric loss

    L = sum_i || C(r_i) - C_hat(r_i) ||^2

with plain SGD on analytic gradients through the compositing equation.

Densities are parameterized as sigma = softplus(raw) so they stay >= 0; colors
are clipped to [0, 1] after every step. Gradients use midpoint sampling so they
are the exact derivative of the deterministic loss.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from radloc.core.geometry import (
    CameraIntrinsics,
    FloatArray,
    Pose,
    Ray,
    as_vec3,
    rays_for_pixels,
    read_poses,
)
from radloc.core.parallel import chunk_slices, ordered_map
from radloc.core.radiance_field import Dims, VoxelGrid, trilinear_stencil
from radloc.core.renderer import (
    Image,
    RaySamplingConfig,
    composite,
    intersect_bbox,
    load_ppm,
    render_rays,
    sample_depths,
)
from radloc.errors import DivergenceError, PreconditionError
from settings import logger


class FitConfig(BaseModel):
    """
    SGD hyperparameters. Colors and density pre-activations take separate step
    sizes; both decay geometrically by `decay` per iteration.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    iterations: int = Field(default=2000, ge=0)
    rays_per_step: int = Field(default=1024, ge=1)
    step_size: float = Field(default=20.0, gt=0.0)
    density_step_size: float = Field(default=500.0, gt=0.0)
    decay: float = Field(default=1.0, gt=0.0, le=1.0)
    n_samples: int = Field(default=64, ge=1)
    holdout_rays: int = Field(default=512, ge=0)
    eval_every: int = Field(default=50, ge=1)
    init_raw: float = -2.0
    init_color: float = Field(default=0.5, ge=0.0, le=1.0)
    seed: int = 0

    def sampling(self) -> RaySamplingConfig:
        return RaySamplingConfig(n_samples=self.n_samples, stratified=False)


@dataclass(frozen=True, eq=False)
class TrainSet:
    """
    Posed training images sharing one camera.
    """

    images: Tuple[Image, ...]
    poses: Tuple[Pose, ...]
    intrinsics: CameraIntrinsics

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.images:
            raise PreconditionError("train set is empty")
        if len(self.images) != len(self.poses):
            raise PreconditionError(
                f"{len(self.images)} images but {len(self.poses)} poses"
            )
        for n, img in enumerate(self.images):
            if not img.matches(self.intrinsics):
                raise PreconditionError(
                    f"image {n} is {img.width}x{img.height}, expected "
                    f"{self.intrinsics.width}x{self.intrinsics.height}"
                )

    def __len__(self) -> int:
        return len(self.images)

    def rays(self) -> "RayBatch":
        """
        Every pixel of every image as one ray batch (image-major, row-major).
        """
        coords = self.intrinsics.all_coords()
        origins, dirs, targets = [], [], []
        for img, pose in zip(self.images, self.poses):
            o, d = rays_for_pixels(self.intrinsics, pose, coords)
            origins.append(o)
            dirs.append(d)
            targets.append(img.pixels.reshape(-1, 3))
        return RayBatch(np.concatenate(origins), np.concatenate(dirs), np.concatenate(targets))


class RayBatch(NamedTuple):
    origins: FloatArray
    directions: FloatArray
    targets: FloatArray

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.origins.shape[0])

    def take(self, index: np.ndarray) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index], self.targets[index])


BatchLike = Union[RayBatch, Sequence[Tuple[Ray, Sequence[float]]]]


def as_ray_batch(batch: BatchLike) -> RayBatch:
    """
    Accept either a RayBatch or a list of (Ray, target RGB) pairs.
    :raises PreconditionError: On an empty batch.
    """
    if isinstance(batch, RayBatch):
        rb = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise PreconditionError("batch is empty")
        rb = RayBatch(
            np.stack([r.origin for r, _ in pairs]),
            np.stack([r.direction for r, _ in pairs]),
            np.stack([as_vec3(c) for _, c in pairs]),
        )
    if len(rb) == 0:
        raise PreconditionError("batch is empty")
    return rb


def softplus(x: FloatArray) -> FloatArray:
    return np.logaddexp(0.0, x)


def sigmoid(x: FloatArray) -> FloatArray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FieldParams:
    """
    Optimizable field: density pre-activations and colors.
    """

    raw: FloatArray
    color: FloatArray
    bbox_min: FloatArray
    bbox_max: FloatArray

    @classmethod
    def initial(
        cls,
        dims: Dims,
        bbox: Tuple[Sequence[float], Sequence[float]],
        raw: float = -2.0,
        color: float = 0.5,
    ) -> "FieldParams":
        nx, ny, nz = (int(n) for n in dims)
        if min(nx, ny, nz) < 1:
            raise PreconditionError(f"grid dims must be positive, got {dims}")
        return cls(
            np.full((nx, ny, nz), raw, dtype=np.float64),
            np.full((nx, ny, nz, 3), color, dtype=np.float64),
            as_vec3(bbox[0]).copy(),
            as_vec3(bbox[1]).copy(),
        )

    @classmethod
    def from_grid(cls, grid: VoxelGrid, floor: float = 1e-6) -> "FieldParams":
        """
        Inverse-softplus a grid's densities; densities below floor map to floor.
        """
        sigma = np.maximum(grid.density, floor)
        # log(expm1(s)) overflows for large s, where it equals s to double precision
        raw = np.where(sigma > 30.0, sigma, np.log(np.expm1(np.minimum(sigma, 30.0))))
        return cls(raw, np.array(grid.color), grid.bbox_min.copy(), grid.bbox_max.copy())

    def copy(self) -> "FieldParams":
        return FieldParams(
            self.raw.copy(), self.color.copy(), self.bbox_min.copy(), self.bbox_max.copy()
        )

    def to_grid(self, storable: bool = False) -> VoxelGrid:
        """
        :param storable: Round to the float32 values a grid file holds.
        """
        grid = VoxelGrid(
            softplus(self.raw), np.clip(self.color, 0.0, 1.0), self.bbox_min, self.bbox_max
        )
        return grid.storable() if storable else grid


@dataclass(frozen=True, eq=False)
class FieldGradient:
    """
    Gradient of the summed photometric loss of a batch.
    """

    raw: FloatArray
    color: FloatArray
    loss: float


def _render_with_grad(
    grid: VoxelGrid, batch: RayBatch, sampling: RaySamplingConfig
) -> Tuple[float, FloatArray, FloatArray]:
    """
    Loss plus gradients w.r.t. flat densities (post-activation) and flat colors.
    """
    n_cells = grid.num_cells
    grad_sigma = np.zeros(n_cells)
    grad_color = np.zeros((n_cells, 3))

    entry, exit_ = intersect_bbox(batch.origins, batch.directions, grid.bbox_min, grid.bbox_max)
    near = np.maximum(entry, sampling.t_near)
    far = np.minimum(exit_, sampling.t_far)
    hit = far > near

    rendered = np.zeros_like(batch.targets)
    if np.any(hit):
        t, deltas = sample_depths(near[hit], far[hit], sampling.n_samples)
        points = batch.origins[hit, None, :] + t[..., None] * batch.directions[hit, None, :]
        idx, wts, _ = trilinear_stencil(grid, points.reshape(-1, 3))
        sig = np.einsum("mc,mc->m", wts, grid.density.reshape(-1)[idx]).reshape(t.shape)
        col = np.einsum("mc,mcj->mj", wts, grid.color.reshape(-1, 3)[idx]).reshape(
            t.shape + (3,)
        )
        comp = composite(sig, deltas, col)
        rendered[hit] = comp.rgb
    residual = rendered - batch.targets
    loss = float(np.sum(residual**2))
    if not np.any(hit):
        return loss, grad_sigma, grad_color

    g = 2.0 * residual[hit]  # dL/dC, (h,3)

    # dL/dc_k = W_k g
    d_col = comp.weights[..., None] * g[:, None, :]

    # dC/ds_m = T_{m+1} c_m - sum_{k>m} W_k c_k, with s_m = sigma_m delta_m
    weighted = comp.weights[..., None] * col
    inclusive = np.cumsum(weighted, axis=1)
    after = inclusive[:, -1:, :] - inclusive
    t_next = comp.transmittance * (1.0 - comp.alpha)
    d_s = np.einsum("hnj,hj->hn", t_next[..., None] * col - after, g)
    d_sig = (d_s * deltas).reshape(-1)

    d_col = d_col.reshape(-1, 3)
    flat_idx = idx.reshape(-1)
    grad_sigma += np.bincount(
        flat_idx, weights=(wts * d_sig[:, None]).reshape(-1), minlength=n_cells
    )
    for ch in range(3):
        grad_color[:, ch] += np.bincount(
            flat_idx, weights=(wts * d_col[:, ch, None]).reshape(-1), minlength=n_cells
        )
    return loss, grad_sigma, grad_color


def photometric_loss(
    grid: VoxelGrid, batch: BatchLike, cfg: RaySamplingConfig
) -> float:
    """
    Sum over the batch of squared RGB residuals between renders and targets.
    Rendering always uses midpoint sampling here.
    :raises PreconditionError: On an empty batch.
    """
    rb = as_ray_batch(batch)
    sampling = cfg.model_copy(update={"stratified": False})
    rendered = render_rays(grid, rb.origins, rb.directions, sampling)
    return float(np.sum((rendered - rb.targets) ** 2))


def loss_gradient(
    params: FieldParams,
    batch: BatchLike,
    cfg: RaySamplingConfig,
    workers: Optional[int] = None,
) -> FieldGradient:
    """
    Exact gradient of photometric_loss(params.to_grid(), batch, cfg) with respect
    to every density pre-activation and color channel.

    Rays are processed in fixed-size chunks whose partial gradients are summed in
    chunk order, so the result does not depend on the worker count.
    :raises PreconditionError: On an empty batch.
    """
    rb = as_ray_batch(batch)
    grid = params.to_grid()
    sampling = cfg.model_copy(update={"stratified": False})
    parts = ordered_map(
        lambda s: _render_with_grad(grid, rb.take(np.arange(len(rb))[s]), sampling),
        chunk_slices(len(rb)),
        workers,
    )
    loss = 0.0
    grad_sigma = np.zeros(grid.num_cells)
    grad_color = np.zeros((grid.num_cells, 3))
    for part_loss, part_sigma, part_color in parts:
        loss += part_loss
        grad_sigma += part_sigma
        grad_color += part_color
    grad_raw = grad_sigma.reshape(params.raw.shape) * sigmoid(params.raw)
    return FieldGradient(grad_raw, grad_color.reshape(params.color.shape), loss)


@dataclass
class FitResult:
    grid: VoxelGrid
    losses: List[float] = field(default_factory=list)
    holdout_losses: List[Tuple[int, float]] = field(default_factory=list)
    flagged: bool = False

    def write_loss_csv(self, path: Union[str, Path]) -> None:
        """
        `iteration,loss` rows, loss being the mean per-ray batch loss.
        """
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss"])
            for it, loss in enumerate(self.losses):
                writer.writerow([it, repr(loss)])


def fit_field(
    train: TrainSet,
    dims: Dims,
    bbox: Tuple[Sequence[float], Sequence[float]],
    fitcfg: FitConfig,
    workers: Optional[int] = None,
    show_progress: bool = False,
) -> FitResult:
    """
    SGD on random ray batches drawn from every pixel of the train set.

    A fixed held-out batch is evaluated every `eval_every` iterations; if its
    loss rises during the second half of the run the result is flagged.
    :param train: Posed images.
    :param dims: Grid resolution.
    :param bbox: (min corner, max corner).
    :param fitcfg: Hyperparameters.
    :param workers: Concurrency budget for gradient chunks.
    :param show_progress: Show a progress bar.
    :raises DivergenceError: If the batch loss becomes non-finite.
    :return: FitResult with the final grid (at grid-file precision) and the loss trace.
    """
    params = FieldParams.initial(dims, bbox, fitcfg.init_raw, fitcfg.init_color)
    if fitcfg.iterations == 0:
        return FitResult(params.to_grid(storable=True))

    batch_rng, holdout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(fitcfg.seed).spawn(2)
    )
    sampling = fitcfg.sampling()
    all_rays = train.rays()
    holdout: Optional[RayBatch] = None
    if fitcfg.holdout_rays:
        holdout = all_rays.take(holdout_rng.integers(0, len(all_rays), fitcfg.holdout_rays))

    result = FitResult(params.to_grid(storable=True))
    previous_holdout: Optional[float] = None
    for it in tqdm(range(fitcfg.iterations), disable=not show_progress, desc="fit"):
        batch = all_rays.take(batch_rng.integers(0, len(all_rays), fitcfg.rays_per_step))
        grad = loss_gradient(params, batch, sampling, workers)
        mean_loss = grad.loss / len(batch)
        if not np.isfinite(mean_loss):
            raise DivergenceError(it, mean_loss)
        result.losses.append(mean_loss)

        scale = fitcfg.decay**it / len(batch)
        params.raw -= fitcfg.density_step_size * scale * grad.raw
        params.color = np.clip(params.color - fitcfg.step_size * scale * grad.color, 0.0, 1.0)
        if not np.all(np.isfinite(params.raw)):
            raise DivergenceError(it, float("nan"))

        if holdout is not None and (it + 1) % fitcfg.eval_every == 0:
            held = photometric_loss(params.to_grid(storable=True), holdout, sampling) / len(holdout)
            result.holdout_losses.append((it + 1, held))
            logger.debug(f"fit iteration {it + 1}: batch {mean_loss:.6f}, held-out {held:.6f}")
            if (
                previous_holdout is not None
                and held > previous_holdout
                and 2 * (it + 1) > fitcfg.iterations
            ):
                result.flagged = True
            previous_holdout = held

    result.grid = params.to_grid(storable=True)
    if result.flagged:
        logger.warning("held-out loss increased late in the fit; consider a smaller step or decay < 1")
    logger.info(
        f"fit done: {fitcfg.iterations} iterations, loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}"
    )
    return result


def load_train_set(
    images_dir: Union[str, Path], poses_file: Union[str, Path], intr: CameraIntrinsics
) -> TrainSet:
    """
    Pair the PPM files of a directory (sorted by name) with poses in file order.
    :raises PreconditionError: If counts differ or images do not match intr.
    """
    paths = sorted(Path(images_dir).glob("*.ppm"))
    poses = read_poses(poses_file)
    if len(paths) != len(poses):
        raise PreconditionError(
            f"{len(paths)} images in {images_dir} but {len(poses)} poses in {poses_file}"
        )
    return TrainSet(tuple(load_ppm(p) for p in paths), tuple(poses), intr)
