"""Per-scan relative pose error of odometry alone, split into axes.

Prints the mean and spread of the scan-to-scan error (sensor frame) so a
systematic drift, e.g. in pitch, is visible separately from noise.

    python scripts/odometry_bias.py --sensor beam16 --motion car --scans 150
"""

import argparse

import numpy as np
from scipy.spatial.transform import Rotation

from lidarslam.config import load_config
from lidarslam.pipeline import SlamPipeline
from lidarslam.synthetic import WorldSpec, generate_synthetic_world


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--sensor", default="beam16")
    parser.add_argument("--motion", default="car")
    parser.add_argument("--scans", type=int, default=150)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--speed", type=float)
    parser.add_argument("--noise", type=float, default=0.02)
    parser.add_argument("--skip", type=int, default=5, help="ignore the first scans (start from rest)")
    parser.add_argument("--config")
    args = parser.parse_args()

    spec = WorldSpec(sensor=args.sensor, motion=args.motion, num_scans=args.scans, speed=args.speed,
                     noise_sigma=args.noise)
    data = generate_synthetic_world(args.seed, spec)
    config = load_config(args.config)
    config.loop_closure.enabled = False
    pipeline = SlamPipeline(config)
    for scan, stamp in zip(data.scans, data.stamps):
        pipeline.add_scan(scan, stamp)
    gt, est = data.ground_truth.poses, pipeline.odometry_poses
    rows = []
    for k in range(args.skip, len(gt)):
        err = (gt[k - 1].inverse() @ gt[k]).inverse() @ (est[k - 1].inverse() @ est[k])
        rows.append(np.r_[err.translation, np.degrees(Rotation.from_matrix(err.rotation).as_rotvec())])
    rows = np.array(rows)
    step = np.mean([np.linalg.norm((gt[k - 1].inverse() @ gt[k]).translation) for k in range(args.skip, len(gt))])
    print(f"mean step {step:.3f} m over {len(rows)} scans")
    print("            x [m]    y [m]    z [m]  roll [deg] pitch [deg] yaw [deg]")
    print("mean  " + " ".join(f"{v:9.4f}" for v in rows.mean(axis=0)))
    print("std   " + " ".join(f"{v:9.4f}" for v in rows.std(axis=0)))


if __name__ == "__main__":
    main()
