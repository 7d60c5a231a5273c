"""
Initial pose estimates for the filter, and random view synthesis (RVS).

coarse_localize scores a finite set of candidate poses photometrically against
the query and returns the best one. rvs_perturb jitters training poses so that
renders at the jittered poses can extend a training set.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from radloc.config import Triple
from radloc.core.field_fit import TrainSet
from radloc.core.geometry import (
    CameraIntrinsics,
    Pose,
    UnitQuaternion,
    format_pose,
    look_at,
    rays_for_pixels,
    sample_pose_in_ball,
)
from radloc.core.radiance_field import VoxelGrid
from radloc.core.renderer import Image, RaySamplingConfig, render_image, render_rays
from radloc.errors import PreconditionError
from radloc.services.mcl import sample_pixels
from settings import logger

PoseTuple = Tuple[float, float, float, float, float, float, float]


class SearchConfig(BaseModel):
    """
    Either an explicit candidate list (`tx ty tz qw qx qy qz` tuples) or a
    lattice over the scene bbox: positions every `spacing` meters on the
    horizontal plane z = height (bbox center height when unset), each with
    `yaw_steps` headings starting from the direction to the bbox center.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    candidates: Tuple[PoseTuple, ...] = ()
    spacing: Optional[float] = Field(default=None, gt=0.0)
    yaw_steps: int = Field(default=8, ge=1)
    height: Optional[float] = None
    m_pixels: int = Field(default=256, ge=1)
    n_samples: int = Field(default=64, ge=1)
    seed: int = 0

    @field_validator("candidates")
    @classmethod
    def _unit_rotations(cls, value: Tuple[PoseTuple, ...]) -> Tuple[PoseTuple, ...]:
        for n, cand in enumerate(value):
            if not np.linalg.norm(cand[3:]) > 0.0:
                raise ValueError(f"candidate {n} has a zero quaternion")
        return value

    @model_validator(mode="after")
    def _has_source(self) -> "SearchConfig":
        if not self.candidates and self.spacing is None:
            raise ValueError("either candidates or spacing must be given")
        return self

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], **kwargs: object) -> "SearchConfig":
        cands = tuple(
            tuple(float(v) for v in list(p.translation) + list(p.rotation.as_array()))
            for p in poses
        )
        return cls.model_validate({"candidates": cands, **kwargs})

    def resolve(self, grid: VoxelGrid) -> List[Pose]:
        """
        The candidate poses this config names for the given map.
        :raises PreconditionError: If the lattice is empty.
        """
        if self.candidates:
            return [Pose(c[:3], UnitQuaternion.from_array(c[3:])) for c in self.candidates]
        assert self.spacing is not None
        poses = lattice_candidates(
            tuple(grid.bbox_min), tuple(grid.bbox_max), self.spacing, self.yaw_steps, self.height
        )
        if not poses:
            raise PreconditionError("candidate lattice is empty")
        return poses


@dataclass(frozen=True)
class CoarseResult:
    pose: Pose
    score: float
    index: int


def lattice_candidates(
    bbox_min: Triple,
    bbox_max: Triple,
    spacing: float,
    yaw_steps: int,
    height: Optional[float] = None,
) -> List[Pose]:
    """
    Horizontal-plane lattice of camera positions over the bbox footprint.
    Each position yields yaw_steps level cameras; heading k is the direction to
    the bbox center rotated by 2*pi*k/yaw_steps about +z.
    :return: Poses ordered by x, then y, then heading.
    """
    if not spacing > 0.0 or yaw_steps < 1:
        raise PreconditionError("spacing must be > 0 and yaw_steps >= 1")
    bmin, bmax = np.asarray(bbox_min, dtype=np.float64), np.asarray(bbox_max, dtype=np.float64)
    center = 0.5 * (bmin + bmax)
    z = center[2] if height is None else float(height)
    xs = np.arange(bmin[0] + 0.5 * spacing, bmax[0], spacing)
    ys = np.arange(bmin[1] + 0.5 * spacing, bmax[1], spacing)
    poses: List[Pose] = []
    for x in xs:
        for y in ys:
            to_center = center[:2] - np.array([x, y])
            base = math.atan2(to_center[1], to_center[0]) if np.any(to_center) else 0.0
            eye = np.array([x, y, z])
            for k in range(yaw_steps):
                heading = base + 2.0 * math.pi * k / yaw_steps
                poses.append(look_at(eye, eye + [math.cos(heading), math.sin(heading), 0.0]))
    return poses


def score_candidates(
    grid: VoxelGrid,
    query: Image,
    intr: CameraIntrinsics,
    candidates: Sequence[Pose],
    coords: np.ndarray,
    sampling: RaySamplingConfig,
    workers: Optional[int] = None,
) -> np.ndarray:
    """
    Mean over the given pixels of the squared RGB difference, per candidate.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    origins, dirs = [], []
    for pose in candidates:
        o, d = rays_for_pixels(intr, pose, c)
        origins.append(o)
        dirs.append(d)
    colors = render_rays(
        grid, np.concatenate(origins), np.concatenate(dirs), sampling, workers=workers
    ).reshape(len(candidates), len(c), 3)
    sq = np.sum((colors - query.at(coords)[None, :, :]) ** 2, axis=2)
    return sq.mean(axis=1)


def coarse_localize(
    grid: VoxelGrid,
    query: Image,
    intr: CameraIntrinsics,
    cfg: SearchConfig,
    workers: Optional[int] = None,
) -> CoarseResult:
    """
    Pick the candidate whose render best matches the query on a shared random
    pixel subset (drawn from cfg.seed). Ties go to the lower index.
    :raises PreconditionError: If the query does not match intr, or
        m_pixels exceeds the pixel count.
    """
    if not query.matches(intr):
        raise PreconditionError(
            f"query is {query.width}x{query.height}, intrinsics are {intr.width}x{intr.height}"
        )
    candidates = cfg.resolve(grid)
    coords = sample_pixels(intr, cfg.m_pixels, np.random.default_rng(cfg.seed))
    scores = score_candidates(
        grid,
        query,
        intr,
        candidates,
        coords,
        RaySamplingConfig(n_samples=cfg.n_samples),
        workers,
    )
    best = int(np.argmin(scores))
    logger.info(
        f"coarse search over {len(candidates)} candidates: best #{best} "
        f"score {scores[best]:.6f} at {format_pose(candidates[best])}"
    )
    return CoarseResult(candidates[best], float(scores[best]), best)


def rvs_perturb(
    train_poses: Sequence[Pose], psi: float, phi: float, rng: np.random.Generator
) -> List[Pose]:
    """
    Map each pose to a uniform sample of the pose ball around it.
    :param psi: Translation radius, meters.
    :param phi: Rotation radius, radians.
    :raises PreconditionError: On negative radii.
    """
    return [sample_pose_in_ball(p, psi, phi, rng) for p in train_poses]


def augment_train_set(
    grid: VoxelGrid,
    train: TrainSet,
    psi: float,
    phi: float,
    rng: np.random.Generator,
    copies: int = 1,
    sampling: Optional[RaySamplingConfig] = None,
    workers: Optional[int] = None,
) -> TrainSet:
    """
    Append `copies` rounds of (perturbed pose, render at that pose) to a train set.
    """
    if copies < 0:
        raise PreconditionError(f"copies must be >= 0, got {copies}")
    cfg = sampling or RaySamplingConfig(n_samples=64)
    images: List[Image] = list(train.images)
    poses: List[Pose] = list(train.poses)
    for _ in range(copies):
        for pose in rvs_perturb(train.poses, psi, phi, rng):
            images.append(render_image(grid, pose, train.intrinsics, cfg, workers=workers))
            poses.append(pose)
    logger.debug(f"augmented train set: {len(train)} -> {len(poses)} views")
    return TrainSet(tuple(images), tuple(poses), train.intrinsics)
