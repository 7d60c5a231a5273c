"""
Tests for the command-line surface: exit codes, outputs and config echo.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from radloc import cli
from radloc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from radloc.core.geometry import CameraIntrinsics, Pose, format_pose, look_at, orbit_poses, parse_pose, write_poses
from radloc.core.radiance_field import VoxelGrid, load_grid, save_grid
from radloc.core.renderer import load_ppm
from radloc.errors import DegenerateWeightsError

pytestmark = pytest.mark.integration

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
INTR = CameraIntrinsics.from_fov(16, 12, 60.0).format()
VIEW = format_pose(look_at((0.0, -3.0, 1.0), (0.0, 0.0, 0.0)))

TINY_BENCH = """
dims = [8, 8, 8]
width = 16
height = 12
queries = {queries}
render_samples = 8

[orbit]
count = 2

[filter]
n_particles = 10
annealed_particles = 5
m_pixels = 8
n_samples = 8
iterations = 2

[scene]
bbox_min = [-1.0, -1.0, -1.0]
bbox_max = [1.0, 1.0, 1.0]

[[scene.primitives]]
shape = "sphere"
center = [0.0, 0.0, 0.0]
radius = 0.5
density = 20.0
color = [0.8, 0.2, 0.2]
"""


@pytest.fixture
def grid_file(tmp_path) -> Path:
    out = tmp_path / "scene.vxrf"
    assert main(["gen-scene", "--spec", str(CONFIGS / "scene_default.toml"), "--dims", "12,12,12", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture
def query_file(tmp_path, grid_file: Path) -> Path:
    out = tmp_path / "query.ppm"
    assert main(["render", "--grid", str(grid_file), "--pose", VIEW, "--intr", INTR, "--samples", "16", "--out", str(out)]) == EXIT_OK
    return out


def echoed_config(err: str) -> dict:
    line = next(line for line in err.splitlines() if line.startswith("{"))
    return json.loads(line)


def localize_args(grid_file: Path, query_file: Path, *extra: str) -> list:
    return [
        "localize",
        "--grid", str(grid_file),
        "--query", str(query_file),
        "--init-pose", VIEW,
        "--particles", "10",
        "--pixels", "16",
        "--iters", "2",
        "--samples", "16",
        *extra,
    ]


class TestGenScene:
    def test_writes_grid_and_echoes_config(self, tmp_path, capsys) -> None:
        out = tmp_path / "a.vxrf"
        assert main(["gen-scene", "--spec", str(CONFIGS / "scene_default.toml"), "--dims", "8,8,8", "--out", str(out)]) == EXIT_OK
        assert load_grid(out).dims == (8, 8, 8)
        echoed = echoed_config(capsys.readouterr().err)
        assert echoed["command"] == "gen-scene"
        assert echoed["seed"] == 0

    def test_repeatable(self, tmp_path) -> None:
        for name in ("a.vxrf", "b.vxrf"):
            main(["gen-scene", "--spec", str(CONFIGS / "scene_default.toml"), "--dims", "8,8,8", "--out", str(tmp_path / name)])
        assert (tmp_path / "a.vxrf").read_bytes() == (tmp_path / "b.vxrf").read_bytes()

    def test_malformed_spec(self, tmp_path) -> None:
        spec = tmp_path / "bad.toml"
        spec.write_text("bbox_min = [-1.0, -1.0, -1.0]\nbbox_max = = 1\n", encoding="utf-8")
        assert main(["gen-scene", "--spec", str(spec), "--dims", "8,8,8", "--out", str(tmp_path / "x.vxrf")]) == EXIT_USAGE

    def test_missing_spec(self, tmp_path) -> None:
        assert main(["gen-scene", "--spec", str(tmp_path / "nope.toml"), "--dims", "8,8,8", "--out", str(tmp_path / "x.vxrf")]) == EXIT_USAGE

    def test_bad_dims(self, tmp_path) -> None:
        assert main(["gen-scene", "--spec", "s.toml", "--dims", "8,8", "--out", "x.vxrf"]) == EXIT_USAGE

    def test_unknown_flag(self) -> None:
        assert main(["gen-scene", "--bogus"]) == EXIT_USAGE


class TestRender:
    def test_zero_density_is_black(self, tmp_path) -> None:
        grid = tmp_path / "empty.vxrf"
        save_grid(VoxelGrid.uniform((4, 4, 4), (-1, -1, -1), (1, 1, 1)), grid)
        out = tmp_path / "black.ppm"
        assert main(["render", "--grid", str(grid), "--pose", VIEW, "--intr", INTR, "--out", str(out)]) == EXIT_OK
        assert not np.any(load_ppm(out).pixels)

    def test_repeatable(self, tmp_path, grid_file: Path, capsys) -> None:
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        for out in (a, b):
            assert main(["render", "--grid", str(grid_file), "--pose", VIEW, "--intr", INTR, "--samples", "16", "--out", str(out)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()
        assert capsys.readouterr().out.split() == [str(a), str(b)]

    def test_pose_file(self, tmp_path, grid_file: Path) -> None:
        poses = tmp_path / "poses.txt"
        write_poses(poses, orbit_poses((0.0, 0.0, 0.0), 3.0, 3, 1.0))
        out = tmp_path / "views"
        assert main(["render", "--grid", str(grid_file), "--pose-file", str(poses), "--intr", INTR, "--samples", "8", "--out", str(out)]) == EXIT_OK
        assert sorted(p.name for p in out.iterdir()) == ["view_000.ppm", "view_001.ppm", "view_002.ppm"]

    def test_bad_pose(self, grid_file: Path, tmp_path) -> None:
        assert main(["render", "--grid", str(grid_file), "--pose", "0 0 0", "--intr", INTR, "--out", str(tmp_path / "x.ppm")]) == EXIT_USAGE

    def test_corrupt_grid(self, tmp_path) -> None:
        grid = tmp_path / "bad.vxrf"
        grid.write_bytes(b"junk")
        assert main(["render", "--grid", str(grid), "--pose", VIEW, "--intr", INTR, "--out", str(tmp_path / "x.ppm")]) == EXIT_USAGE


class TestFit:
    def test_zero_iterations_writes_initial_grid(self, tmp_path, grid_file: Path) -> None:
        poses = tmp_path / "poses.txt"
        write_poses(poses, orbit_poses((0.0, 0.0, 0.0), 3.0, 2, 1.0))
        views = tmp_path / "views"
        main(["render", "--grid", str(grid_file), "--pose-file", str(poses), "--intr", INTR, "--samples", "8", "--out", str(views)])
        out = tmp_path / "fit.vxrf"
        code = main(["fit", "--images", str(views), "--poses", str(poses), "--intr", INTR, "--dims", "4,4,4", "--iters", "0", "--out", str(out)])
        assert code == EXIT_OK
        assert np.all(load_grid(out).color == np.float32(0.5))

    def test_few_iterations_write_loss_csv(self, tmp_path, grid_file: Path) -> None:
        poses = tmp_path / "poses.txt"
        write_poses(poses, orbit_poses((0.0, 0.0, 0.0), 3.0, 2, 1.0))
        views = tmp_path / "views"
        main(["render", "--grid", str(grid_file), "--pose-file", str(poses), "--intr", INTR, "--samples", "8", "--out", str(views)])
        loss = tmp_path / "loss.csv"
        code = main([
            "fit", "--images", str(views), "--poses", str(poses), "--intr", INTR, "--dims", "4,4,4",
            "--iters", "3", "--rays", "32", "--samples", "8", "--loss-csv", str(loss), "--out", str(tmp_path / "fit.vxrf"),
        ])
        assert code == EXIT_OK
        assert loss.read_text(encoding="utf-8").splitlines()[0] == "iteration,loss"

    def test_count_mismatch(self, tmp_path, grid_file: Path) -> None:
        poses = tmp_path / "poses.txt"
        write_poses(poses, orbit_poses((0.0, 0.0, 0.0), 3.0, 2, 1.0))
        views = tmp_path / "views"
        main(["render", "--grid", str(grid_file), "--pose-file", str(poses), "--intr", INTR, "--samples", "8", "--out", str(views)])
        write_poses(poses, orbit_poses((0.0, 0.0, 0.0), 3.0, 1, 1.0))
        code = main(["fit", "--images", str(views), "--poses", str(poses), "--intr", INTR, "--dims", "4,4,4", "--out", str(tmp_path / "f.vxrf")])
        assert code == EXIT_USAGE


class TestLocalize:
    def test_prints_pose(self, grid_file: Path, query_file: Path, capsys) -> None:
        assert main(localize_args(grid_file, query_file)) == EXIT_OK
        captured = capsys.readouterr()
        pose = parse_pose(captured.out.strip())
        assert isinstance(pose, Pose)
        echoed = echoed_config(captured.err)
        assert echoed["filter"]["n_particles"] == 10
        assert echoed["filter"]["sigma_t"] == 0.005

    def test_cambridge_preset(self, grid_file: Path, query_file: Path, capsys) -> None:
        assert main(localize_args(grid_file, query_file, "--preset", "cambridge")) == EXIT_OK
        echoed = echoed_config(capsys.readouterr().err)
        assert echoed["filter"]["sigma_r"] == 0.01

    def test_trace_with_ground_truth(self, tmp_path, grid_file: Path, query_file: Path) -> None:
        plain, with_gt = tmp_path / "plain.csv", tmp_path / "gt.csv"
        assert main(localize_args(grid_file, query_file, "--trace", str(plain))) == EXIT_OK
        assert main(localize_args(grid_file, query_file, "--trace", str(with_gt), "--gt-pose", VIEW)) == EXIT_OK
        with open(plain, newline="", encoding="utf-8") as f:
            plain_header = next(csv.reader(f))
        with open(with_gt, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert "trans_err_m" not in plain_header
        assert rows[0][-2:] == ["trans_err_m", "rot_err_deg"]
        assert len(rows) == 4

    def test_same_seed_same_trace(self, tmp_path, grid_file: Path, query_file: Path) -> None:
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["--seed", "3", *localize_args(grid_file, query_file, "--trace", str(a))])
        main(["--seed", "3", "--workers", "2", *localize_args(grid_file, query_file, "--trace", str(b))])
        assert a.read_bytes() == b.read_bytes()

    def test_too_many_pixels(self, grid_file: Path, query_file: Path) -> None:
        args = localize_args(grid_file, query_file)
        args[args.index("--pixels") + 1] = "1000"
        assert main(args) == EXIT_USAGE

    def test_degenerate_weights_exit_code(self, grid_file: Path, query_file: Path, monkeypatch) -> None:
        def degenerate(*args, **kwargs):
            raise DegenerateWeightsError("weight sum is 0.0")

        monkeypatch.setattr(cli, "refine", degenerate)
        assert main(localize_args(grid_file, query_file)) == EXIT_RUNTIME

    def test_missing_query(self, tmp_path, grid_file: Path) -> None:
        assert main(localize_args(grid_file, tmp_path / "missing.ppm")) == EXIT_USAGE


class TestEvaluate:
    def test_empty_query_set(self, tmp_path) -> None:
        bench = tmp_path / "bench.toml"
        bench.write_text(TINY_BENCH.format(queries=0), encoding="utf-8")
        out = tmp_path / "results"
        assert main(["evaluate", "--bench", str(bench), "--out", str(out)]) == EXIT_OK
        assert (out / "summary.csv").read_text(encoding="utf-8").splitlines() == [
            "median_terr_m,median_rerr_deg,impr_t_pct,impr_r_pct,queries,failures"
        ]
        assert len((out / "report.csv").read_text(encoding="utf-8").splitlines()) == 1

    def test_echo_shows_effective_seed(self, tmp_path, capsys) -> None:
        bench = tmp_path / "bench.toml"
        bench.write_text(TINY_BENCH.format(queries=0), encoding="utf-8")
        assert main(["evaluate", "--bench", str(bench), "--out", str(tmp_path / "a")]) == EXIT_OK
        echoed = echoed_config(capsys.readouterr().err)
        assert echoed["seed"] == 0
        assert echoed["bench"]["seed"] == 0
        assert main(["--seed", "7", "evaluate", "--bench", str(bench), "--out", str(tmp_path / "b")]) == EXIT_OK
        assert echoed_config(capsys.readouterr().err)["seed"] == 7

    def test_summary_independent_of_workers(self, tmp_path) -> None:
        bench = tmp_path / "bench.toml"
        bench.write_text(TINY_BENCH.format(queries=2), encoding="utf-8")
        for workers in ("1", "8"):
            code = main(["--workers", workers, "evaluate", "--bench", str(bench), "--out", str(tmp_path / workers)])
            assert code == EXIT_OK
        assert (tmp_path / "1" / "summary.csv").read_bytes() == (tmp_path / "8" / "summary.csv").read_bytes()

    def test_invalid_bench(self, tmp_path) -> None:
        bench = tmp_path / "bench.toml"
        bench.write_text(TINY_BENCH.format(queries=-1), encoding="utf-8")
        assert main(["evaluate", "--bench", str(bench), "--out", str(tmp_path / "r")]) == EXIT_USAGE
