#!/usr/bin/env python3
"""
Test runner for radloc.

    python run_tests.py quick                 # everything but the slow acceptance runs
    python run_tests.py acceptance --workers 4
    python run_tests.py unit -k resample
"""

import argparse
import os
import subprocess
import sys
from typing import Dict, List, Tuple

# mode -> (marker expression, extra pytest args, description)
MODES: Dict[str, Tuple[str, List[str], str]] = {
    "unit": ("unit and not slow", [], "Unit Tests"),
    "integration": ("integration and not slow", [], "CLI / Integration Tests"),
    "quick": ("not slow", [], "Quick Tests (excluding slow tests)"),
    "acceptance": ("slow", ["--durations=0"], "Acceptance Tests (benchmark, long fit, repeated refinement)"),
    "coverage": (
        "not slow",
        ["--cov=radloc", "--cov-report=html", "--cov-report=term"],
        "Tests with Coverage Report",
    ),
    "all": ("", [], "All Tests"),
}


def build_command(args: argparse.Namespace) -> Tuple[List[str], str]:
    markers, extra, description = MODES[args.test_type]
    cmd = [sys.executable, "-m", "pytest", *extra]
    if args.markers:
        markers = f"({markers}) and ({args.markers})" if markers else args.markers
    if markers:
        cmd.extend(["-m", markers])
    if args.file:
        cmd.append(args.file)
    if args.function:
        cmd.extend(["-k", args.function])
    if args.verbose:
        cmd.append("-v")
    if args.print:
        cmd.append("-s")
    return cmd, description


def build_env(args: argparse.Namespace) -> Dict[str, str]:
    env = dict(os.environ)
    if args.workers is not None:
        env["RADLOC_WORKERS"] = str(args.workers)
    if args.chunk_rays is not None:
        env["RADLOC_CHUNK_RAYS"] = str(args.chunk_rays)
    return env


def run_command(cmd: List[str], env: Dict[str, str], description: str) -> bool:
    print(f"\n{'='*60}")
    print(f"Running: {description}")
    print(f"{'='*60}")
    print(f"Command: {' '.join(cmd)}")
    print("-" * 60)

    result = subprocess.run(cmd, env=env, check=False)
    if result.returncode == 0:
        print(f"\n✅ {description} completed successfully!")
        return True
    print(f"\n❌ {description} failed with exit code {result.returncode}")
    return False


def main() -> None:
    parser = argparse.ArgumentParser(description="Test runner for radloc")
    parser.add_argument("test_type", choices=sorted(MODES), help="Which tests to run")
    parser.add_argument("--verbose", "-v", action="store_true", help="Run tests in verbose mode")
    parser.add_argument("--markers", "-m", help="Additional marker expression, ANDed with the mode's")
    parser.add_argument("--file", "-f", help="Run tests from a specific file")
    parser.add_argument("--function", "-k", help="Run tests matching a name pattern")
    parser.add_argument("--workers", "-w", type=int, help="Set RADLOC_WORKERS for the run")
    parser.add_argument("--chunk-rays", type=int, help="Set RADLOC_CHUNK_RAYS for the run")
    parser.add_argument("--print", "-p", action="store_true", help="Print test output")
    args = parser.parse_args()

    cmd, description = build_command(args)
    if run_command(cmd, build_env(args), description):
        print("\n🎉 All tests passed!")
        sys.exit(0)
    print("\n💥 Some tests failed!")
    sys.exit(1)


if __name__ == "__main__":
    main()
