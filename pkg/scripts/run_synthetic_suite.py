"""Run the pipeline on the four synthetic sensor/motion combinations, with and without loop closure.

    python scripts/run_synthetic_suite.py [--scans 400] [--seed 7] [--config FILE] [--only beam64-car]
"""

import argparse
import logging
import time

from lidarslam.config import load_config
from lidarslam.evaluation import evaluate
from lidarslam.pipeline import SlamPipeline
from lidarslam.synthetic import WorldSpec, generate_synthetic_world

COMBOS = [("beam64", "car"), ("beam16", "car"), ("beam64", "handheld"), ("beam16", "handheld")]


def run_once(data, config, loop_closure: bool):
    config.loop_closure.enabled = loop_closure
    start = time.perf_counter()
    pipeline = SlamPipeline(config)
    for scan, stamp in zip(data.scans, data.stamps):
        pipeline.add_scan(scan, stamp)
    result = pipeline.finish()
    return result, time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--scans", type=int, default=400)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--config")
    parser.add_argument("--only", help="one combination, e.g. beam16-car")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    print(f"{'combo':18s} {'LC':>3s} {'maps':>4s} {'loops':>5s} {'ATE m':>8s} {'ATE deg':>8s} {'time s':>7s}")
    for sensor, motion in COMBOS:
        if args.only and args.only != f"{sensor}-{motion}":
            continue
        data = generate_synthetic_world(args.seed, WorldSpec(sensor=sensor, motion=motion, num_scans=args.scans))
        for lc in (True, False):
            result, seconds = run_once(data, load_config(args.config), lc)
            rep = evaluate(result.trajectory, data.ground_truth)
            print(f"{sensor + '-' + motion:18s} {'on' if lc else 'off':>3s} {len(result.local_maps):4d} "
                  f"{len(result.closures):5d} {rep.ate_translation_rmse:8.3f} {rep.ate_rotation_rmse:8.3f} "
                  f"{seconds:7.1f}", flush=True)


if __name__ == "__main__":
    main()
