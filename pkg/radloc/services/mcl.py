"""
Monte Carlo pose refinement against a VoxelGrid map.

Each iteration runs predict -> update -> estimate/record -> anneal -> resample.
A particle's likelihood is the heuristic

    w_i = (M / (sum_j ||I(p_j) - C(r(p_j), X_i)||^2 + eps)) ** k

over M query pixels shared by every particle within the iteration.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from radloc.core.geometry import (
    CameraIntrinsics,
    FloatArray,
    Pose,
    PoseError,
    UnitQuaternion,
    perturb_poses,
    pose_error,
    rays_for_pixels,
    sample_poses_in_ball,
    weighted_mean_arrays,
)
from radloc.core.radiance_field import VoxelGrid
from radloc.core.renderer import Image, RaySamplingConfig, render_rays
from radloc.errors import DegenerateWeightsError, PreconditionError
from settings import logger

Resampling = Literal["multinomial", "systematic"]


class FilterConfig(BaseModel):
    """
    Filter parameters. Defaults are the indoor setting; see cambridge() for the
    outdoor variant.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_particles: int = Field(default=200, ge=1)
    m_pixels: int = Field(default=256, ge=1)
    sigma_t: float = Field(default=0.005, ge=0.0)
    sigma_r: float = Field(default=0.005, ge=0.0)
    init_radius_t: float = Field(default=0.02, ge=0.0)
    init_radius_r: float = Field(default=0.02, ge=0.0)
    spread_threshold_1: float = Field(default=0.01, ge=0.0)
    spread_threshold_2: float = Field(default=0.005, ge=0.0)
    annealed_particles: int = Field(default=100, ge=1)
    weight_exponent: int = Field(default=4, ge=1)
    iterations: int = Field(default=50, ge=1)
    loss_epsilon: float = Field(default=1e-8, gt=0.0)
    seed: int = 0
    resampling: Resampling = "multinomial"
    n_samples: int = Field(default=64, ge=1)

    @model_validator(mode="after")
    def _thresholds(self) -> "FilterConfig":
        if not self.spread_threshold_2 < self.spread_threshold_1:
            raise ValueError(
                f"spread_threshold_2 ({self.spread_threshold_2}) must be < "
                f"spread_threshold_1 ({self.spread_threshold_1})"
            )
        return self

    @classmethod
    def cambridge(cls, **overrides: object) -> "FilterConfig":
        """
        Outdoor preset: rotational motion noise raised to 0.01.
        """
        return cls.model_validate({"sigma_r": 0.01, **overrides})

    def sampling(self) -> RaySamplingConfig:
        return RaySamplingConfig(n_samples=self.n_samples, stratified=False)


@dataclass(frozen=True)
class Particle:
    pose: Pose
    weight: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.weight) or self.weight < 0.0:
            raise PreconditionError(f"particle weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True, eq=False)
class FilterState:
    """
    Particle set stored as arrays: translations (n,3), rotations (n,4) w-first,
    weights (n,).
    """

    translations: FloatArray
    rotations: FloatArray
    weights: FloatArray
    iteration: int = 0
    sigma_t: float = 0.0
    sigma_r: float = 0.0
    anneal_stage: int = 0

    def __post_init__(self) -> None:
        t = np.array(self.translations, dtype=np.float64).reshape(-1, 3)
        q = np.array(self.rotations, dtype=np.float64).reshape(-1, 4)
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if len(t) == 0:
            raise PreconditionError("particle set is empty")
        if not len(t) == len(q) == len(w):
            raise PreconditionError(
                f"particle arrays differ in length: {len(t)}, {len(q)}, {len(w)}"
            )
        for arr in (t, q, w):
            arr.flags.writeable = False
        object.__setattr__(self, "translations", t)
        object.__setattr__(self, "rotations", q)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return int(self.weights.shape[0])

    @property
    def particles(self) -> List[Particle]:
        return [
            Particle(Pose(t, UnitQuaternion.from_array(q)), float(w))
            for t, q, w in zip(self.translations, self.rotations, self.weights)
        ]

    def poses(self) -> List[Pose]:
        return [p.pose for p in self.particles]

    def with_weights(self, weights: FloatArray) -> "FilterState":
        return replace(self, weights=weights)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    estimate: Pose
    spread_m: float
    ess: float
    anneal_stage: int
    error: Optional[PoseError] = None


@dataclass
class Trace:
    """
    One record for the initial particle set plus one per iteration.
    """

    records: List[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def errors(self) -> List[Optional[PoseError]]:
        return [r.error for r in self.records]

    def write_csv(self, path: Union[str, Path]) -> None:
        """
        Write `iteration,tx,ty,tz,qw,qx,qy,qz,spread_m,ess,anneal_stage`, plus
        `trans_err_m,rot_err_deg` when every record carries an error.
        """
        with_errors = bool(self.records) and all(r.error is not None for r in self.records)
        header = ["iteration", "tx", "ty", "tz", "qw", "qx", "qy", "qz", "spread_m", "ess", "anneal_stage"]
        if with_errors:
            header += ["trans_err_m", "rot_err_deg"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for r in self.records:
                values = list(r.estimate.translation) + list(r.estimate.rotation.as_array())
                row = [str(r.iteration)] + [repr(float(v)) for v in values]
                row += [repr(r.spread_m), repr(r.ess), str(r.anneal_stage)]
                if with_errors and r.error is not None:
                    row += [repr(r.error.translation_err), repr(r.error.rotation_err)]
                writer.writerow(row)


def init_particles(
    initial: Pose, cfg: FilterConfig, rng: np.random.Generator
) -> FilterState:
    """
    Draw n_particles poses uniformly in the initialization ball around initial,
    with uniform weights.
    """
    n = cfg.n_particles
    t, q = sample_poses_in_ball(
        np.tile(initial.translation, (n, 1)),
        np.tile(initial.rotation.as_array(), (n, 1)),
        cfg.init_radius_t,
        cfg.init_radius_r,
        rng,
    )
    return FilterState(t, q, np.full(n, 1.0 / n), 0, cfg.sigma_t, cfg.sigma_r, 0)


def predict(state: FilterState, rng: np.random.Generator) -> FilterState:
    """
    Diffuse every particle with the current motion noise; weights are kept.
    """
    t, q = perturb_poses(state.translations, state.rotations, state.sigma_t, state.sigma_r, rng)
    return replace(state, translations=t, rotations=q, iteration=state.iteration + 1)


def raw_weights(residuals: npt.ArrayLike, m_pixels: int, cfg: FilterConfig) -> FloatArray:
    """
    Unnormalized likelihoods (M / (residual + eps)) ** k.
    :param residuals: (n,) per-particle sums of squared RGB differences.
    :param m_pixels: M, the number of pixels the residuals were summed over.
    """
    r = np.asarray(residuals, dtype=np.float64)
    return (m_pixels / (r + cfg.loss_epsilon)) ** cfg.weight_exponent


def log_weights(residuals: npt.ArrayLike, m_pixels: int, cfg: FilterConfig) -> FloatArray:
    """
    Natural log of raw_weights, finite for any exponent.
    """
    r = np.asarray(residuals, dtype=np.float64)
    return cfg.weight_exponent * (math.log(m_pixels) - np.log(r + cfg.loss_epsilon))


def normalized_weights(residuals: npt.ArrayLike, m_pixels: int, cfg: FilterConfig) -> FloatArray:
    """
    raw_weights scaled to sum to 1, computed from the log weights shifted by
    their maximum so that the best particle has unnormalized weight 1.
    """
    logw = log_weights(residuals, m_pixels, cfg)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def sample_pixels(
    intr: CameraIntrinsics, m_pixels: int, rng: np.random.Generator
) -> npt.NDArray[np.int64]:
    """
    M distinct pixel coordinates, uniform without replacement.
    :raises PreconditionError: If M exceeds the pixel count.
    :return: (M,2) (u, v) coordinates.
    """
    if m_pixels > intr.pixel_count:
        raise PreconditionError(
            f"cannot sample {m_pixels} pixels from a {intr.width}x{intr.height} image"
        )
    flat = rng.choice(intr.pixel_count, size=m_pixels, replace=False)
    return np.stack([flat % intr.width, flat // intr.width], axis=1).astype(np.int64)


def render_particles(
    state: FilterState,
    grid: VoxelGrid,
    intr: CameraIntrinsics,
    coords: npt.ArrayLike,
    cfg: FilterConfig,
    workers: Optional[int] = None,
) -> FloatArray:
    """
    Render the same pixels from every particle's pose.
    :return: (n, M, 3) colors, particle-major.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    origins, dirs = [], []
    for t, q in zip(state.translations, state.rotations):
        o, d = rays_for_pixels(intr, Pose(t, UnitQuaternion.from_array(q)), c)
        origins.append(o)
        dirs.append(d)
    colors = render_rays(
        grid, np.concatenate(origins), np.concatenate(dirs), cfg.sampling(), workers=workers
    )
    return colors.reshape(len(state), len(c), 3)


def update_weights(
    state: FilterState,
    grid: VoxelGrid,
    query: Image,
    intr: CameraIntrinsics,
    cfg: FilterConfig,
    rng: np.random.Generator,
    workers: Optional[int] = None,
) -> FilterState:
    """
    Reweight particles by photometric agreement with the query on one shared
    random pixel set, then normalize.
    :raises PreconditionError: If the query does not match intr or M exceeds
        the pixel count.
    """
    if not query.matches(intr):
        raise PreconditionError(
            f"query is {query.width}x{query.height}, intrinsics are {intr.width}x{intr.height}"
        )
    coords = sample_pixels(intr, cfg.m_pixels, rng)
    renders = render_particles(state, grid, intr, coords, cfg, workers)
    residuals = np.sum((renders - query.at(coords)[None, :, :]) ** 2, axis=(1, 2))
    return state.with_weights(normalized_weights(residuals, cfg.m_pixels, cfg))


def multinomial_resample(
    weights: FloatArray, n: int, rng: np.random.Generator
) -> npt.NDArray[np.int64]:
    """
    n independent draws with probability proportional to weight.
    """
    p = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(p), size=n, replace=True, p=p / p.sum()).astype(np.int64)


def systematic_resample(
    weights: FloatArray, n: int, rng: np.random.Generator
) -> npt.NDArray[np.int64]:
    """
    One uniform offset, n evenly spaced pointers into the weight CDF.
    """
    p = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(p / p.sum())
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), len(p) - 1).astype(np.int64)


def resample(
    state: FilterState, rng: np.random.Generator, scheme: Resampling = "multinomial"
) -> FilterState:
    """
    Draw len(state) particles with replacement, proportional to weight, and
    reset weights to uniform.
    :raises DegenerateWeightsError: If the weights are all zero or not finite.
    """
    w = state.weights
    total = float(w.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateWeightsError(
            f"cannot resample at iteration {state.iteration}: weight sum is {total}"
        )
    n = len(state)
    draw = systematic_resample if scheme == "systematic" else multinomial_resample
    idx = draw(w, n, rng)
    return replace(
        state,
        translations=state.translations[idx],
        rotations=state.rotations[idx],
        weights=np.full(n, 1.0 / n),
    )


def translation_spread(state: FilterState) -> float:
    """
    Mean over x, y, z of the unweighted per-axis standard deviation.
    """
    return float(np.mean(np.std(state.translations, axis=0)))


def effective_sample_size(weights: npt.ArrayLike) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    return float(1.0 / np.sum(w**2))


def anneal(state: FilterState, cfg: FilterConfig) -> FilterState:
    """
    Stage 0 -> 1 when the spread drops below spread_threshold_1: keep the
    annealed_particles highest-weight particles and halve the base sigmas.
    Stage 1 -> 2 below spread_threshold_2: sigmas become a quarter of base.
    At most one transition per call.
    """
    spread = translation_spread(state)
    if state.anneal_stage == 0 and spread < cfg.spread_threshold_1:
        keep = min(cfg.annealed_particles, len(state))
        # highest weight first, lower index wins ties
        order = np.lexsort((np.arange(len(state)), -state.weights))[:keep]
        idx = np.sort(order)
        w = state.weights[idx]
        total = w.sum()
        logger.debug(
            f"anneal stage 1 at iteration {state.iteration}: spread {spread:.5f}, "
            f"{len(state)} -> {keep} particles"
        )
        return replace(
            state,
            translations=state.translations[idx],
            rotations=state.rotations[idx],
            weights=w / total if total > 0 else np.full(keep, 1.0 / keep),
            sigma_t=cfg.sigma_t / 2.0,
            sigma_r=cfg.sigma_r / 2.0,
            anneal_stage=1,
        )
    if state.anneal_stage == 1 and spread < cfg.spread_threshold_2:
        logger.debug(f"anneal stage 2 at iteration {state.iteration}: spread {spread:.5f}")
        return replace(
            state, sigma_t=cfg.sigma_t / 4.0, sigma_r=cfg.sigma_r / 4.0, anneal_stage=2
        )
    return state


def estimate(state: FilterState) -> Pose:
    """
    Weighted average of the particle poses.
    """
    t, q = weighted_mean_arrays(state.translations, state.rotations, state.weights)
    return Pose(t, UnitQuaternion.from_array(q))


class ParticleFilter:
    """
    Refines one query's pose against a map.
    """

    def __init__(
        self,
        grid: VoxelGrid,
        query: Image,
        intr: CameraIntrinsics,
        cfg: FilterConfig,
        ground_truth: Optional[Pose] = None,
        workers: Optional[int] = None,
    ) -> None:
        """
        :param grid: The map.
        :param query: Observed image.
        :param intr: Query camera intrinsics.
        :param cfg: Filter parameters.
        :param ground_truth: When given, every trace record carries a PoseError.
        :param workers: Concurrency budget for particle rendering.
        :raises PreconditionError: If the query does not match intr.
        """
        if not query.matches(intr):
            raise PreconditionError(
                f"query is {query.width}x{query.height}, intrinsics are {intr.width}x{intr.height}"
            )
        self.grid = grid
        self.query = query
        self.intr = intr
        self.cfg = cfg
        self.ground_truth = ground_truth
        self.workers = workers
        self.state: Optional[FilterState] = None
        self.trace = Trace()

    def _record(self, state: FilterState, pose: Pose) -> None:
        err = pose_error(pose, self.ground_truth) if self.ground_truth is not None else None
        self.trace.append(
            TraceRecord(
                state.iteration,
                pose,
                translation_spread(state),
                effective_sample_size(state.weights),
                state.anneal_stage,
                err,
            )
        )

    def start(self, initial: Pose, rng: np.random.Generator) -> FilterState:
        self.trace = Trace()
        self.state = init_particles(initial, self.cfg, rng)
        self._record(self.state, estimate(self.state))
        return self.state

    def step(self, rng: np.random.Generator) -> Pose:
        """
        One predict -> update -> estimate -> anneal -> resample round.
        :raises PreconditionError: If start() has not been called.
        :raises DegenerateWeightsError: From resampling.
        :return: The estimate recorded this iteration.
        """
        if self.state is None:
            raise PreconditionError("filter not started")
        state = predict(self.state, rng)
        state = update_weights(
            state, self.grid, self.query, self.intr, self.cfg, rng, self.workers
        )
        pose = estimate(state)
        self._record(state, pose)
        last = self.trace.records[-1]
        logger.debug(
            f"iteration {state.iteration}: spread {last.spread_m:.5f}, ess {last.ess:.1f}, "
            f"stage {state.anneal_stage}"
        )
        state = anneal(state, self.cfg)
        self.state = resample(state, rng, self.cfg.resampling)
        return pose

    def run(self, initial: Pose, rng: np.random.Generator) -> Tuple[Pose, Trace]:
        self.start(initial, rng)
        pose = self.trace.records[0].estimate
        for _ in range(self.cfg.iterations):
            pose = self.step(rng)
        return pose, self.trace


def refine(
    grid: VoxelGrid,
    query: Image,
    intr: CameraIntrinsics,
    initial: Pose,
    cfg: FilterConfig,
    rng: Optional[np.random.Generator] = None,
    ground_truth: Optional[Pose] = None,
    workers: Optional[int] = None,
) -> Tuple[Pose, Trace]:
    """
    Refine initial against the query image.
    :param rng: Random source; defaults to one seeded with cfg.seed.
    :raises PreconditionError: On mismatched query and intrinsics or M too large.
    :raises DegenerateWeightsError: If every particle weight vanishes.
    :return: Final estimate and the trace (iterations + 1 records).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pf = ParticleFilter(grid, query, intr, cfg, ground_truth, workers)
    pose, trace = pf.run(initial, rng)
    final = trace.records[-1]
    logger.info(
        f"refined over {cfg.iterations} iterations: spread {final.spread_m:.5f}, "
        f"stage {final.anneal_stage}"
    )
    return pose, trace
