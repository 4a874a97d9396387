"""Scan-by-scan orchestration: odometry, local maps, loop closure and pose-graph refinement."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig, dump_config
from .evaluation import Trajectory, write_kitti, write_tum
from .geometry import RigidTransform, TimedPointCloud
from .local_mapping import LocalMap, SplitPolicy, VoxelStats, finalize, integrate, should_split, split
from .loop_closure import LoopClosureDetector, ValidatedClosure
from .occupancy import OccupancyGrid3D, export_pgm_yaml, slice_2d
from .odometry import OdometryState, process_scan
from .pose_graph import OptimizationReport, PoseGraph, fine_grained_optimize, write_g2o

log = logging.getLogger(__name__)


@dataclass
class TimingReport:
    latencies: list[float] = field(default_factory=list)

    def add(self, seconds: float) -> None:
        self.latencies.append(seconds)

    def summary(self) -> dict:
        lat = np.asarray(self.latencies)
        if len(lat) == 0:
            return {"scans": 0}
        total = float(lat.sum())
        return {
            "scans": int(len(lat)),
            "total_s": total,
            "mean_ms": 1e3 * float(lat.mean()),
            "p50_ms": 1e3 * float(np.percentile(lat, 50)),
            "p90_ms": 1e3 * float(np.percentile(lat, 90)),
            "p99_ms": 1e3 * float(np.percentile(lat, 99)),
            "max_ms": 1e3 * float(lat.max()),
            "throughput_hz": len(lat) / total if total > 0 else float("inf"),
        }

    def to_text(self) -> str:
        rows = [f"{k:14s} {v:.3f}" if isinstance(v, float) else f"{k:14s} {v}" for k, v in self.summary().items()]
        return "\n".join(rows) + "\n"


@dataclass
class PipelineResult:
    trajectory: Trajectory
    odometry_trajectory: Trajectory
    local_maps: list[LocalMap]
    graph: PoseGraph
    closures: list[ValidatedClosure]
    timing: TimingReport
    fine_report: OptimizationReport | None = None
    scan_errors: dict[int, str] = field(default_factory=dict)


class SlamPipeline:
    def __init__(self, config: PipelineConfig, density_dir: str | Path | None = None,
                 keep_frames: bool = False):
        config.validate()
        self.config = config
        self.policy = SplitPolicy(config.local_mapping.splitting_distance)
        self.state = OdometryState.fresh(config.odometry)
        lm = config.local_mapping
        self.current = LocalMap.empty(0, RigidTransform.identity(), lm.voxel_size, lm.max_points_per_voxel)
        self.maps: list[LocalMap] = []
        self.graph = PoseGraph()
        self.graph.add_node(0, RigidTransform.identity(), fixed=True)
        self.closures: list[ValidatedClosure] = []
        self.detector = (LoopClosureDetector(config.loop_closure, lm.voxel_size, density_dir)
                         if config.loop_closure.enabled else None)
        self._executor = ThreadPoolExecutor(max_workers=1) if self.detector and config.loop_closure.asynchronous else None
        self._pending: list[Future] = []
        self.stamps: list[float] = []
        self.odometry_poses: list[RigidTransform] = []
        self.frames: list[np.ndarray] = []
        self.keep_frames = keep_frames
        self.timing = TimingReport()
        self.scan_errors: dict[int, str] = {}

    @property
    def num_scans(self) -> int:
        return len(self.stamps)

    def add_scan(self, scan: TimedPointCloud, stamp: float) -> RigidTransform:
        """Process one scan; returns its current global pose estimate."""
        start = time.perf_counter()
        self._apply_finished(block=False)
        index = self.num_scans
        pose, frame = process_scan(self.state, scan, self.config.odometry)
        if self.state.last_error:
            self.scan_errors[index] = self.state.last_error
        integrate(self.current, pose, frame)
        self.stamps.append(float(stamp))
        global_pose = self.current.keypose @ pose
        self.odometry_poses.append(global_pose)
        if self.keep_frames:
            self.frames.append(frame.points)
        if should_split(self.current, self.policy):
            self._split()
        self.timing.add(time.perf_counter() - start)
        return global_pose

    def _split(self) -> None:
        finished, fresh = split(self.current, self.config.local_mapping.crop_radius)
        last = finished.local_trajectory[-1]
        # odometry continues in the new keypose frame
        self.state.last_pose = RigidTransform.identity()
        self.state.local_odom_map = self.state.local_odom_map.transformed(last.inverse())
        self.maps.append(finished)
        self.current = fresh
        self.graph.add_node(fresh.id, self.graph.nodes[finished.id].estimate @ last)
        self.graph.add_odometry_edge(finished.id, fresh.id, last)
        self._detect(finished)

    def _detect(self, local_map: LocalMap) -> None:
        if self.detector is None:
            return
        if self._executor is not None:
            self._pending.append(self._executor.submit(self.detector.process, local_map))
        else:
            self._add_closures(self.detector.process(local_map))

    def _apply_finished(self, block: bool) -> None:
        while self._pending and (block or self._pending[0].done()):
            self._add_closures(self._pending.pop(0).result())

    def _add_closures(self, closures: list[ValidatedClosure]) -> None:
        if not closures:
            return
        pg = self.config.pose_graph
        for closure in closures:
            self.graph.add_loop_edge(closure, pg.loop_edge_weight)
            self.closures.append(closure)
        report = self.graph.optimize(pg.max_iterations, pg.tolerance, pg.initial_damping)
        log.info("pose graph: chi2 %.4g -> %.4g in %d iterations", report.initial_chi2,
                 report.final_chi2, report.iterations)
        for m in [*self.maps, self.current]:
            m.keypose = self.graph.nodes[m.id].estimate

    def finish(self) -> PipelineResult:
        if self.current.local_trajectory:
            if self.current.grid.empty():
                self.current.voxel_stats = VoxelStats(np.zeros((0, 3)), np.zeros((0, 3)))
            else:
                finalize(self.current)
            self.maps.append(self.current)
            if len(self.maps) > 1 and len(self.current.local_trajectory) > 1:
                self._detect(self.current)
        self._apply_finished(block=True)
        if self._executor is not None:
            self._executor.shutdown()
        pg = self.config.pose_graph
        poses, _, report = fine_grained_optimize(self.maps, pg.max_iterations, pg.tolerance, pg.initial_damping)
        stamps = np.array(self.stamps)
        return PipelineResult(Trajectory(stamps, poses), Trajectory(stamps.copy(), list(self.odometry_poses)),
                              self.maps, self.graph, self.closures, self.timing, report, self.scan_errors)


def build_occupancy(frames, poses, config: PipelineConfig) -> OccupancyGrid3D:
    grid = OccupancyGrid3D.from_config(config.occupancy)
    for points, pose in zip(frames, poses):
        grid.integrate(pose, points, config.occupancy.max_range)
    return grid


def run(source, config: PipelineConfig, output_dir: str | Path | None = None,
        export_occupancy: bool = False, dump_density: bool = False) -> PipelineResult:
    """Process every scan of ``source`` and write the run artifacts to ``output_dir``."""
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(config, out / "config.txt")
    density_dir = out / "density" if (out is not None and dump_density) else None
    pipeline = SlamPipeline(config, density_dir, keep_frames=export_occupancy)
    for index in range(len(source)):
        scan, stamp = source.load(index)
        pipeline.add_scan(scan, stamp)
    result = pipeline.finish()
    if out is not None:
        write_tum(result.trajectory, out / "trajectory_tum.txt")
        write_kitti(result.trajectory, out / "trajectory_kitti.txt")
        write_tum(result.odometry_trajectory, out / "odometry_tum.txt")
        write_g2o(result.graph, out / "pose_graph.g2o")
        (out / "timing.txt").write_text(result.timing.to_text())
        summary = {
            "scans": pipeline.num_scans,
            "local_maps": len(result.local_maps),
            "loop_closures": [
                {"source": c.source_map_id, "target": c.target_map_id, "overlap": c.overlap, "inliers": c.inlier_count}
                for c in result.closures
            ],
            "failed_scans": {str(k): v for k, v in result.scan_errors.items()},
            "timing": result.timing.summary(),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        if export_occupancy:
            grid = build_occupancy(pipeline.frames, result.trajectory.poses, config)
            occ = config.occupancy
            export_pgm_yaml(slice_2d(grid, occ.z_min, occ.z_max), out / "occupancy.pgm", out / "occupancy.yaml",
                            occ.occupied_threshold, occ.free_threshold)
    return result
