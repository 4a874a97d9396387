"""Command line entry point: ``lidarslam {run,evaluate,synth,export-map}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, load_config
from .evaluation import EvaluationError, Trajectory, evaluate, read_trajectory
from .occupancy import OccupancyGrid3D, export_pgm_yaml, slice_2d
from .pipeline import run
from .synthetic import WorldSpec, generate_synthetic_world

log = logging.getLogger("lidarslam")


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.no_loop_closure:
        config.loop_closure.enabled = False
    source = io.ScanSource.open(args.data, args.format)
    if len(source) == 0:
        raise io.ScanLoadError(f"{args.data}: no scans")
    result = run(source, config, args.output, export_occupancy=args.export_occupancy,
                 dump_density=args.dump_density)
    print(f"{len(source)} scans, {len(result.local_maps)} local maps, {len(result.closures)} loop closures")
    print(f"outputs written to {args.output}")
    if args.gt:
        print(evaluate(result.trajectory, read_trajectory(args.gt)).to_text(), end="")
    return 0


def _is_kitti(path) -> bool:
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            return len(line.split()) == 12
    return False


def _load_pair(est_path, gt_path):
    """KITTI files carry no timestamps; pair them with the other trajectory by index."""
    est, gt = read_trajectory(est_path), read_trajectory(gt_path)
    est_kitti, gt_kitti = _is_kitti(est_path), _is_kitti(gt_path)
    if est_kitti != gt_kitti:
        if len(est) != len(gt):
            raise EvaluationError(f"KITTI trajectory needs one pose per reference pose ({len(est)} vs {len(gt)})")
        if est_kitti:
            est = Trajectory(gt.timestamps.copy(), est.poses)
        else:
            gt = Trajectory(est.timestamps.copy(), gt.poses)
    return est, gt


def _cmd_evaluate(args) -> int:
    report = evaluate(*_load_pair(args.trajectory, args.gt), args.max_dt)
    print(report.to_json() if args.json else report.to_text(), end="" if not args.json else "\n")
    return 0


def _cmd_synth(args) -> int:
    spec = WorldSpec(sensor=args.sensor, motion=args.motion, trajectory=args.trajectory, num_scans=args.scans,
                     noise_sigma=args.noise, speed=args.speed)
    data = generate_synthetic_world(args.seed, spec, args.output)
    print(f"{len(data.scans)} scans and groundtruth.txt written to {args.output}")
    return 0


def _cmd_export_map(args) -> int:
    config = load_config(args.config)
    source = io.ScanSource.open(args.data, args.format)
    traj = read_trajectory(args.trajectory)
    if len(traj) != len(source):
        raise EvaluationError(f"trajectory has {len(traj)} poses but {args.data} holds {len(source)} scans")
    occ = config.occupancy
    grid = OccupancyGrid3D.from_config(occ)
    lo, hi = config.odometry.min_range, min(config.odometry.max_range, occ.max_range)
    for index, pose in enumerate(traj.poses):
        points = source.load(index)[0].points
        r = np.linalg.norm(points, axis=1)
        grid.integrate(pose, points[(r >= lo) & (r <= hi)], occ.max_range)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    export_pgm_yaml(slice_2d(grid, occ.z_min, occ.z_max), out / "occupancy.pgm", out / "occupancy.yaml",
                    occ.occupied_threshold, occ.free_threshold)
    print(f"occupancy map written to {out / 'occupancy.pgm'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarslam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the SLAM pipeline on a directory of scans")
    p.add_argument("data", help="scan directory")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--format", choices=io.FORMATS, help="scan format (detected when omitted)")
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--export-occupancy", action="store_true", help="also write occupancy.pgm/.yaml")
    p.add_argument("--dump-density", action="store_true", help="write one density PGM per local map")
    p.add_argument("--gt", help="ground-truth trajectory to evaluate against")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", help="ATE and KITTI relative error of a trajectory")
    p.add_argument("trajectory", help="estimated trajectory (TUM or KITTI)")
    p.add_argument("--gt", required=True, help="ground-truth trajectory (TUM or KITTI)")
    p.add_argument("--max-dt", type=float, default=0.01, help="timestamp association tolerance [s]")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic scan sequence with ground truth")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sensor", choices=("beam16", "beam64"), default="beam64")
    p.add_argument("--motion", choices=("car", "handheld"), default="car")
    p.add_argument("--trajectory", choices=("loop", "straight"), default="loop")
    p.add_argument("--scans", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.02, help="range noise sigma [m]")
    p.add_argument("--speed", type=float, help="override the motion profile speed [m/s]")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("export-map", help="occupancy PGM/YAML from scans and a trajectory")
    p.add_argument("data", help="scan directory")
    p.add_argument("--trajectory", required=True, help="one pose per scan (TUM or KITTI)")
    p.add_argument("--config")
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=io.FORMATS)
    p.set_defaults(func=_cmd_export_map)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, io.ScanLoadError, EvaluationError, OSError, ValueError) as exc:
        print(f"lidarslam: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
