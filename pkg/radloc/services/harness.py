"""
Synthetic localization benchmark.

generate_benchmark builds a procedural scene, renders an orbit of training views
and a set of query views with known poses, and gives each query an initial
estimate. run_experiment refines every query and aggregates median errors and
the iteration-1 -> final improvement; emit_report writes the CSVs.

Output directory layout:

    report.csv       query_id,init_terr_m,init_rerr_deg,it1_terr_m,it1_rerr_deg,final_terr_m,final_rerr_deg,wall_ms
    summary.csv      median_terr_m,median_rerr_deg,impr_t_pct,impr_r_pct,queries,failures
    convergence.csv  iteration,median_terr_m,median_rerr_deg
    traces/query_<id>.csv
"""

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from radloc.config import Triple, load_model
from radloc.core.field_fit import TrainSet
from radloc.core.geometry import (
    CameraIntrinsics,
    Pose,
    PoseError,
    UnitQuaternion,
    look_at,
    orbit_poses,
    pose_error,
    sample_pose_in_ball,
)
from radloc.core.parallel import derive_seed, ordered_map, spawn_rngs
from radloc.core.radiance_field import Primitive, SceneSpec, VoxelGrid, build_procedural_scene
from radloc.core.renderer import Image, RaySamplingConfig, render_image
from radloc.errors import RadlocError
from radloc.services.initializer import PoseTuple, SearchConfig, coarse_localize
from radloc.services.mcl import FilterConfig, Trace, refine
from settings import logger

REPORT_HEADER = [
    "query_id",
    "init_terr_m",
    "init_rerr_deg",
    "it1_terr_m",
    "it1_rerr_deg",
    "final_terr_m",
    "final_rerr_deg",
    "wall_ms",
]
SUMMARY_HEADER = ["median_terr_m", "median_rerr_deg", "impr_t_pct", "impr_r_pct", "queries", "failures"]
CONVERGENCE_HEADER = ["iteration", "median_terr_m", "median_rerr_deg"]


class OrbitSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    center: Triple = (0.0, 0.0, 0.0)
    radius: float = Field(default=3.0, gt=0.0)
    count: int = Field(default=60, ge=1)
    height: float = 1.0


class BenchmarkSpec(BaseModel):
    """
    Everything needed to regenerate a benchmark from a seed.

    TOML layout: top-level keys for the fields below, a `[scene]` table with
    `[[scene.primitives]]` entries, an optional `[orbit]` table, an optional
    `[filter]` table overriding any FilterConfig field, and an optional
    `[search]` table for init_mode = "coarse".
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    scene: SceneSpec
    dims: Tuple[int, int, int] = (64, 64, 64)
    width: int = Field(default=160, ge=1)
    height: int = Field(default=120, ge=1)
    fov_x_deg: float = Field(default=60.0, gt=0.0, lt=180.0)
    intrinsics: Optional[str] = None
    orbit: OrbitSpec = OrbitSpec()
    train_poses: Tuple[PoseTuple, ...] = ()
    queries: int = Field(default=20, ge=0)
    query_radius_jitter: float = Field(default=0.1, ge=0.0, lt=1.0)
    query_height_jitter: float = Field(default=0.4, ge=0.0)
    init_offset_t: float = Field(default=0.05, ge=0.0)
    init_offset_r: float = Field(default=math.radians(5.0), ge=0.0)
    init_mode: Literal["perturb", "coarse"] = "perturb"
    search: Optional[SearchConfig] = None
    render_samples: int = Field(default=64, ge=1)
    filter: FilterConfig = FilterConfig()
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if min(value) < 1:
            raise ValueError(f"dims must be positive, got {value}")
        return value

    @field_validator("intrinsics")
    @classmethod
    def _parse_intrinsics(cls, value: Optional[str]) -> Optional[str]:
        if value is not None:
            CameraIntrinsics.parse(value)
        return value

    @classmethod
    def default(cls) -> "BenchmarkSpec":
        """
        A 2 m box with a floor slab and four colored primitives, 64^3 cells,
        60 orbit views, 20 queries at 160x120.
        """
        scene = SceneSpec(
            bbox_min=(-1.0, -1.0, -1.0),
            bbox_max=(1.0, 1.0, 1.0),
            primitives=[
                Primitive(shape="box", min=(-1.0, -1.0, -1.0), max=(1.0, 1.0, -0.8), density=30.0, color=(0.55, 0.55, 0.5)),
                Primitive(shape="sphere", center=(0.4, 0.3, -0.35), radius=0.35, density=40.0, color=(0.9, 0.2, 0.15)),
                Primitive(shape="box", min=(-0.7, -0.6, -0.8), max=(-0.2, -0.1, 0.1), density=40.0, color=(0.2, 0.7, 0.3)),
                Primitive(shape="sphere", center=(-0.3, 0.5, 0.2), radius=0.25, density=40.0, color=(0.15, 0.3, 0.9)),
                Primitive(shape="box", min=(0.1, -0.7, -0.8), max=(0.6, -0.3, -0.4), density=40.0, color=(0.95, 0.85, 0.2)),
            ],
        )
        return cls(scene=scene, filter=FilterConfig(m_pixels=128, n_samples=48), render_samples=48)

    def camera(self) -> CameraIntrinsics:
        if self.intrinsics is not None:
            return CameraIntrinsics.parse(self.intrinsics)
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_x_deg)

    def with_filter(self, **overrides: Any) -> "BenchmarkSpec":
        data = self.filter.model_dump()
        data.update(overrides)
        return self.model_copy(update={"filter": FilterConfig.model_validate(data)})


def load_benchmark_spec(path: Union[str, Path]) -> BenchmarkSpec:
    """
    :raises ConfigError: On I/O, syntax or validation failure, with the line.
    """
    return load_model(BenchmarkSpec, path)


@dataclass(frozen=True, eq=False)
class QueryCase:
    query_id: int
    image: Image
    ground_truth: Pose
    initial: Pose


@dataclass(frozen=True, eq=False)
class Benchmark:
    grid: VoxelGrid
    intrinsics: CameraIntrinsics
    train_poses: Tuple[Pose, ...]
    train: Optional[TrainSet]
    queries: Tuple[QueryCase, ...]


@dataclass
class QueryResult:
    query_id: int
    init_error: PoseError
    it1_error: Optional[PoseError] = None
    final_error: Optional[PoseError] = None
    wall_ms: float = 0.0
    trace: Optional[Trace] = None
    failure: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


@dataclass
class MetricsReport:
    """
    Aggregates are None when no query succeeded.
    """

    results: List[QueryResult] = field(default_factory=list)
    median_terr_m: Optional[float] = None
    median_rerr_deg: Optional[float] = None
    impr_t_pct: Optional[float] = None
    impr_r_pct: Optional[float] = None
    convergence: List[Tuple[int, float, float]] = field(default_factory=list)

    @property
    def queries(self) -> int:
        return len(self.results)

    @property
    def failures(self) -> int:
        return sum(1 for r in self.results if r.failed)

    def succeeded(self) -> List[QueryResult]:
        return [r for r in self.results if not r.failed]


def median(values: Sequence[float]) -> float:
    """
    Middle order statistic, or the mean of the two middle ones for even n.
    :raises ValueError: On an empty sequence.
    """
    if len(values) == 0:
        raise ValueError("median of an empty sequence")
    ordered = sorted(float(v) for v in values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def improvement_pct(before: float, after: float) -> Optional[float]:
    """
    (before - after) / before * 100; negative when the error grew. An error that
    stays at 0 improves by 0; growth from 0 has no percentage and gives None.
    """
    if before == 0.0:
        return 0.0 if after == 0.0 else None
    return (before - after) / before * 100.0


def _query_poses(spec: BenchmarkSpec, rng: np.random.Generator) -> List[Pose]:
    center = np.asarray(spec.orbit.center, dtype=np.float64)
    poses = []
    for _ in range(spec.queries):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        radius = spec.orbit.radius * rng.uniform(1.0 - spec.query_radius_jitter, 1.0 + spec.query_radius_jitter)
        height = spec.orbit.height + rng.uniform(-spec.query_height_jitter, spec.query_height_jitter)
        eye = center + np.array([radius * math.cos(theta), radius * math.sin(theta), height])
        poses.append(look_at(eye, center))
    return poses


def generate_benchmark(
    spec: BenchmarkSpec, render_train: bool = True, workers: Optional[int] = None
) -> Benchmark:
    """
    Build the grid, render training and query views from their poses, and draw
    each query's initial estimate. Deterministic given spec.seed.
    :param render_train: When False, training views are not rendered (the
        experiment only needs their poses).
    """
    grid = build_procedural_scene(spec.scene, spec.dims)
    intr = spec.camera()
    sampling = RaySamplingConfig(n_samples=spec.render_samples)
    if spec.train_poses:
        train_poses = [Pose(p[:3], UnitQuaternion.from_array(p[3:])) for p in spec.train_poses]
    else:
        train_poses = orbit_poses(spec.orbit.center, spec.orbit.radius, spec.orbit.count, spec.orbit.height)

    train: Optional[TrainSet] = None
    if render_train:
        images = [render_image(grid, p, intr, sampling, workers=workers) for p in train_poses]
        train = TrainSet(tuple(images), tuple(train_poses), intr)

    pose_rng, init_rng = spawn_rngs(spec.seed, 2)
    truths = _query_poses(spec, pose_rng)
    search = spec.search or SearchConfig.from_poses(
        train_poses,
        m_pixels=min(spec.filter.m_pixels, intr.pixel_count),
        n_samples=spec.filter.n_samples,
        seed=spec.seed,
    )
    queries = []
    for n, truth in enumerate(truths):
        image = render_image(grid, truth, intr, sampling, workers=workers)
        if spec.init_mode == "coarse":
            initial = coarse_localize(grid, image, intr, search, workers).pose
        else:
            initial = sample_pose_in_ball(truth, spec.init_offset_t, spec.init_offset_r, init_rng)
        queries.append(QueryCase(n, image, truth, initial))
    logger.info(
        f"benchmark: {spec.dims} grid, {len(train_poses)} training poses, {len(queries)} queries"
    )
    return Benchmark(grid, intr, tuple(train_poses), train, tuple(queries))


def _run_query(
    bench: Benchmark, case: QueryCase, spec: BenchmarkSpec, workers: Optional[int]
) -> QueryResult:
    result = QueryResult(case.query_id, pose_error(case.initial, case.ground_truth))
    rng = np.random.default_rng(derive_seed(spec.seed, 2 + case.query_id))
    start = time.perf_counter()
    try:
        _, trace = refine(
            bench.grid,
            case.image,
            bench.intrinsics,
            case.initial,
            spec.filter,
            rng,
            ground_truth=case.ground_truth,
            workers=workers,
        )
    except RadlocError as exc:
        result.failure = f"{type(exc).__name__}: {exc}"
        return result
    finally:
        result.wall_ms = (time.perf_counter() - start) * 1000.0
    result.trace = trace
    result.it1_error = trace.records[1].error
    result.final_error = trace.records[-1].error
    return result


def convergence_curve(traces: Sequence[Trace]) -> List[Tuple[int, float, float]]:
    """
    Per-iteration median translation and rotation error across traces that
    carry errors. Traces are truncated to the shortest.
    """
    with_errors = [t for t in traces if t.records and all(e is not None for e in t.errors())]
    if not with_errors:
        return []
    length = min(len(t) for t in with_errors)
    curve = []
    for k in range(length):
        errs = [t.records[k].error for t in with_errors]
        curve.append(
            (
                with_errors[0].records[k].iteration,
                median([e.translation_err for e in errs if e is not None]),
                median([e.rotation_err for e in errs if e is not None]),
            )
        )
    return curve


def aggregate(results: List[QueryResult]) -> MetricsReport:
    report = MetricsReport(results=results)
    ok = report.succeeded()
    if not ok:
        return report
    final_t = [r.final_error.translation_err for r in ok if r.final_error is not None]
    final_r = [r.final_error.rotation_err for r in ok if r.final_error is not None]
    it1_t = [r.it1_error.translation_err for r in ok if r.it1_error is not None]
    it1_r = [r.it1_error.rotation_err for r in ok if r.it1_error is not None]
    report.median_terr_m = median(final_t)
    report.median_rerr_deg = median(final_r)
    report.impr_t_pct = improvement_pct(median(it1_t), report.median_terr_m)
    report.impr_r_pct = improvement_pct(median(it1_r), report.median_rerr_deg)
    report.convergence = convergence_curve([r.trace for r in ok if r.trace is not None])
    return report


def run_experiment(
    spec: BenchmarkSpec,
    workers: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> MetricsReport:
    """
    Refine every query of the benchmark and aggregate.

    Queries run concurrently; each has its own seed derived from spec.seed and
    its index, and results are gathered in query order. Failing queries are
    kept in the report but excluded from the aggregates.
    :param out_dir: When given, emit_report writes there.
    """
    bench = generate_benchmark(spec, render_train=False, workers=workers)
    results = ordered_map(lambda case: _run_query(bench, case, spec, 1), list(bench.queries), workers)
    report = aggregate(results)
    if report.failures:
        logger.warning(f"{report.failures} of {report.queries} queries failed and were excluded")
        for r in results:
            if r.failed:
                logger.warning(f"query {r.query_id}: {r.failure}")
    if report.median_terr_m is not None:
        logger.info(
            f"median error {report.median_terr_m:.4f} m / {report.median_rerr_deg:.3f} deg, "
            f"improvement {_pct(report.impr_t_pct)} / {_pct(report.impr_r_pct)}"
        )
    if out_dir is not None:
        emit_report(report, out_dir)
    return report


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.1f}%"


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _error_cells(err: Optional[PoseError]) -> List[str]:
    if err is None:
        return ["", ""]
    return [_fmt(err.translation_err), _fmt(err.rotation_err)]


def emit_report(report: MetricsReport, path: Union[str, Path]) -> None:
    """
    Write report.csv, summary.csv, convergence.csv and traces/ under path,
    overwriting earlier output. summary.csv has one row whenever there were
    queries; aggregate cells are empty when none succeeded (or, for the
    improvements, when the iteration-1 median was 0 and grew).
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_HEADER)
        for r in report.results:
            writer.writerow(
                [str(r.query_id)]
                + _error_cells(r.init_error)
                + _error_cells(r.it1_error)
                + _error_cells(r.final_error)
                + [f"{r.wall_ms:.3f}"]
            )

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_HEADER)
        if report.queries:
            writer.writerow(
                [
                    _fmt(report.median_terr_m),
                    _fmt(report.median_rerr_deg),
                    _fmt(report.impr_t_pct),
                    _fmt(report.impr_r_pct),
                    str(report.queries),
                    str(report.failures),
                ]
            )

    with open(out / "convergence.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CONVERGENCE_HEADER)
        for iteration, med_t, med_r in report.convergence:
            writer.writerow([str(iteration), _fmt(med_t), _fmt(med_r)])

    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for r in report.results:
        if r.trace is not None:
            r.trace.write_csv(traces / f"query_{r.query_id}.csv")


def read_summary(path: Union[str, Path]) -> Dict[str, Optional[float]]:
    """
    Parse summary.csv back into a dict; empty when it has no data row. Empty
    cells read as None.
    """
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {key: float(value) if value else None for key, value in rows[0].items()}
