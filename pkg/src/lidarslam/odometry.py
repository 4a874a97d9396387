"""Scan-to-map point-to-point ICP odometry with a constant-velocity prior."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import OdometryConfig
from .geometry import (
    RigidTransform,
    TimedPointCloud,
    se3_exp,
    se3_exp_batch,
    se3_log,
    voxel_downsample,
)
from .voxel_map import VoxelHashMap

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """ICP found no correspondences; the guess or the map has diverged."""


class DegenerateGeometryError(RegistrationError):
    """The Gauss-Newton normal matrix is singular."""


@dataclass
class RegistrationResult:
    pose: RigidTransform
    iterations: int
    final_correction_norm: float
    costs: list[tuple[float, float]] | None = None


class AdaptiveThreshold:
    """Correspondence gate from the RMS deviation between prediction and ICP."""

    def __init__(self, initial_threshold: float, min_motion: float, max_range: float, floor: float):
        self.initial_threshold = initial_threshold
        self.min_motion = min_motion
        self.max_range = max_range
        self.floor = floor
        self.sum_squares = 0.0
        self.num_samples = 0

    def update(self, model_deviation: RigidTransform, motion: RigidTransform) -> None:
        if np.linalg.norm(motion.translation) < self.min_motion:
            return
        error = 2.0 * self.max_range * math.sin(0.5 * model_deviation.angle())
        error += float(np.linalg.norm(model_deviation.translation))
        self.sum_squares += error * error
        self.num_samples += 1

    @property
    def rms(self) -> float:
        if self.num_samples == 0:
            return self.initial_threshold
        return math.sqrt(self.sum_squares / self.num_samples)

    @property
    def max_correspondence_distance(self) -> float:
        return max(3.0 * self.rms, self.floor)


@dataclass
class OdometryState:
    last_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    last_delta: RigidTransform = field(default_factory=RigidTransform.identity)
    local_odom_map: VoxelHashMap | None = None
    threshold: AdaptiveThreshold | None = None
    last_error: str | None = None

    @classmethod
    def fresh(cls, config: OdometryConfig) -> OdometryState:
        state = cls()
        state.reset(config)
        return state

    def reset(self, config: OdometryConfig) -> None:
        self.last_pose = RigidTransform.identity()
        self.last_delta = RigidTransform.identity()
        self.local_odom_map = VoxelHashMap(config.voxel_size, config.max_points_per_voxel)
        self.threshold = AdaptiveThreshold(
            config.initial_threshold, config.min_motion, config.max_range, config.voxel_size
        )
        self.last_error = None


def deskew(cloud: TimedPointCloud, delta: RigidTransform, mid: float = 0.5) -> TimedPointCloud:
    """Move each point to the mid-sweep frame under constant-velocity motion."""
    if cloud.timestamps is None or len(cloud) == 0:
        return cloud
    xi = se3_log(delta)
    if not np.any(xi):
        return cloud
    rotations, translations = se3_exp_batch((cloud.timestamps - mid)[:, None] * xi[None, :])
    points = np.einsum("nij,nj->ni", rotations, cloud.points) + translations
    return TimedPointCloud(points, cloud.timestamps)


def preprocess(scan: TimedPointCloud, min_range: float, max_range: float, voxel_size: float,
               delta: RigidTransform, deskew_enabled: bool = True):
    """Return ``(frame_for_registration, frame_for_map)``."""
    if not 0 <= min_range < max_range:
        raise ValueError("expected 0 <= min_range < max_range")
    if scan.timestamps is not None and len(scan.timestamps) != len(scan.points):
        raise ValueError("timestamps length does not match point count")
    cloud = deskew(scan, delta) if deskew_enabled else scan
    ranges = np.linalg.norm(scan.points, axis=1)
    cloud = cloud.select((ranges >= min_range) & (ranges <= max_range))
    frame_for_map = voxel_downsample(cloud, 0.5 * voxel_size)
    frame_for_registration = voxel_downsample(frame_for_map, 1.5 * voxel_size)
    return frame_for_registration, frame_for_map


def predict(state: OdometryState) -> RigidTransform:
    return state.last_pose @ state.last_delta


def normal_equations(source: np.ndarray, targets: np.ndarray, pose: RigidTransform):
    """Gauss-Newton system of the point-to-point cost at ``pose``.

    The correction is applied on the right, ``pose * exp(dw)``.  Returns
    ``(H, g, chi)`` with ``chi = sum |pose*s - q|^2``; the gradient of chi
    with respect to ``dw`` at zero is ``2 g`` and the GN step is ``-H^-1 g``.
    """
    rot = pose.rotation
    residuals = source @ rot.T + pose.translation - targets
    local = residuals @ rot  # R^T r per row
    n = len(source)
    sq = np.einsum("ni,ni->n", source, source)
    h = np.zeros((6, 6))
    h[:3, :3] = np.eye(3) * sq.sum() - source.T @ source
    s_sum = source.sum(axis=0)
    x, y, z = s_sum
    h[:3, 3:] = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    h[3:, :3] = h[:3, 3:].T
    h[3:, 3:] = np.eye(3) * n
    g = np.concatenate([np.cross(source, local).sum(axis=0), local.sum(axis=0)])
    chi = float(np.einsum("ni,ni->", residuals, residuals))
    return h, g, chi


def register_scan(source: TimedPointCloud | np.ndarray, voxel_map: VoxelHashMap,
                  initial_guess: RigidTransform, max_correspondence_distance: float,
                  max_iterations: int = 500, convergence_tol: float = 1e-4,
                  record_costs: bool = False) -> RegistrationResult:
    src = source.points if isinstance(source, TimedPointCloud) else np.asarray(source, dtype=float)
    if len(src) == 0:
        raise ValueError("source cloud is empty")
    if voxel_map.empty():
        raise ValueError("map is empty")
    pose = initial_guess
    costs = [] if record_costs else None
    norm = math.inf
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        world = pose.apply(src)
        targets, _, seq = voxel_map.nearest_neighbors(world, max_correspondence_distance)
        found = seq >= 0
        if not found.any():
            raise RegistrationError("no correspondences within the gating distance")
        s, q = src[found], targets[found]
        h, g, chi = normal_equations(s, q, pose)
        if np.linalg.cond(h) > 1e12:
            raise DegenerateGeometryError("singular normal matrix")
        dw = -np.linalg.solve(h, g)
        if not np.all(np.isfinite(dw)):
            raise RegistrationError("non-finite Gauss-Newton step")
        pose = pose @ se3_exp(dw)
        if costs is not None:
            after = pose.apply(s) - q
            costs.append((chi, float(np.einsum("ni,ni->", after, after))))
        norm = float(np.linalg.norm(dw))
        if norm < convergence_tol:
            break
    return RegistrationResult(pose, iteration, norm, costs)


def process_scan(state: OdometryState, scan: TimedPointCloud, config: OdometryConfig):
    """Register one scan; returns ``(pose, map_frame)`` in the odometry frame.

    On registration failure the pose falls back to the motion prediction and
    the message is stored in ``state.last_error``.
    """
    if state.local_odom_map is None:
        state.reset(config)
    state.last_error = None
    source, map_frame = preprocess(
        scan, config.min_range, config.max_range, config.voxel_size, state.last_delta, config.deskew
    )
    prediction = predict(state)
    pose = prediction
    if not state.local_odom_map.empty() and len(source):
        try:
            result = register_scan(
                source, state.local_odom_map, prediction,
                state.threshold.max_correspondence_distance,
                config.max_iterations, config.convergence_tol,
            )
            pose = result.pose
        except RegistrationError as exc:
            state.last_error = str(exc)
            log.warning("registration failed, using motion prediction: %s", exc)
    elif len(source) == 0 and not state.local_odom_map.empty():
        state.last_error = "no points left after preprocessing"
    state.threshold.update(prediction.inverse() @ pose, state.last_pose.inverse() @ pose)
    state.local_odom_map.insert(pose.apply(map_frame.points))
    state.local_odom_map.remove_far_voxels(pose.translation, config.max_range)
    state.last_delta = state.last_pose.inverse() @ pose
    state.last_pose = pose
    return pose, map_frame
