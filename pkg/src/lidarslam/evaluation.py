"""Trajectory I/O and accuracy metrics (ATE and the KITTI segment metric)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform

KITTI_SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


class EvaluationError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[RigidTransform]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, t: RigidTransform) -> Trajectory:
        return Trajectory(self.timestamps.copy(), [t @ p for p in self.poses])


def read_tum(path: str | Path) -> Trajectory:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            t, x, y, z, qx, qy, qz, qw = (float(v) for v in line.replace(",", " ").split())
        except ValueError:
            raise EvaluationError(f"{path}:{lineno}: expected 't x y z qx qy qz qw'") from None
        stamps.append(t)
        poses.append(RigidTransform(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), [x, y, z]))
    return Trajectory(np.array(stamps), poses)


def write_tum(trajectory: Trajectory, path: str | Path) -> None:
    lines = []
    for t, pose in zip(trajectory.timestamps, trajectory.poses):
        q = Rotation.from_matrix(pose.rotation).as_quat()
        values = (t, *pose.translation, *q)
        lines.append(" ".join(repr(float(v)) for v in values))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_kitti(path: str | Path, timestamps=None) -> Trajectory:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        values = [float(v) for v in line.split()]
        if len(values) != 12:
            raise EvaluationError(f"{path}:{lineno}: expected 12 values, got {len(values)}")
        m = np.array(values).reshape(3, 4)
        poses.append(RigidTransform(m[:, :3], m[:, 3]))
    stamps = np.arange(len(poses), dtype=float) if timestamps is None else timestamps
    return Trajectory(stamps, poses)


def write_kitti(trajectory: Trajectory, path: str | Path) -> None:
    lines = [" ".join(repr(float(v)) for v in p.matrix()[:3].ravel()) for p in trajectory.poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path: str | Path) -> Trajectory:
    """TUM (8 columns) or KITTI (12 columns), detected from the first data line."""
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            return read_kitti(path) if len(line.split()) == 12 else read_tum(path)
    return Trajectory(np.zeros(0), [])


def associate(est: Trajectory, gt: Trajectory, max_dt: float):
    """Greedy nearest-timestamp pairing; returns ``(est_indices, gt_indices)``."""
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    diff = np.abs(est.timestamps[:, None] - gt.timestamps[None, :])
    ei, gi = np.nonzero(diff <= max_dt)
    order = np.lexsort((gi, ei, diff[ei, gi]))
    used_e, used_g = set(), set()
    pairs = []
    for k in order:
        e, g = int(ei[k]), int(gi[k])
        if e in used_e or g in used_g:
            continue
        used_e.add(e)
        used_g.add(g)
        pairs.append((e, g))
    if not pairs:
        raise EvaluationError("no timestamp pairs within max_dt")
    pairs.sort()
    e_idx, g_idx = zip(*pairs)
    return np.array(e_idx), np.array(g_idx)


def rotation_angle_between(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotations via the chordal distance (exactly 0 for equal inputs)."""
    chord = float(np.linalg.norm(ra - rb))
    return 2.0 * math.asin(min(1.0, chord / (2.0 * math.sqrt(2.0))))


def rigid_alignment(source: np.ndarray, target: np.ndarray):
    """Rotation and translation minimising sum |R s + t - q|^2 (no scale).

    Returns ``(transform, degenerate)``; degenerate inputs (fewer than three
    points or collinear) give the identity.
    """
    if len(source) < 3:
        return RigidTransform.identity(), True
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    sc, tc = source - mu_s, target - mu_t
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        return RigidTransform.identity(), True
    u, _, vt = np.linalg.svd(tc.T @ sc)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    aligned = RigidTransform(rot, mu_t - rot @ mu_s)
    # identity is kept when it fits at least as well (e.g. already aligned input)
    if np.sum((source - target) ** 2) <= np.sum((aligned.apply(source) - target) ** 2):
        return RigidTransform.identity(), False
    return aligned, False


@dataclass
class AteResult:
    translation_rmse: float
    rotation_rmse_deg: float
    degenerate: bool = False
    alignment: RigidTransform | None = None

    def __iter__(self):
        yield self.translation_rmse
        yield self.rotation_rmse_deg


def ate(est_poses: list[RigidTransform], gt_poses: list[RigidTransform]) -> AteResult:
    if len(est_poses) != len(gt_poses):
        raise ValueError("pose lists differ in length")
    if not est_poses:
        raise EvaluationError("no pose pairs")
    p_est = np.array([p.translation for p in est_poses])
    p_gt = np.array([p.translation for p in gt_poses])
    align, degenerate = rigid_alignment(p_est, p_gt)
    residual = align.apply(p_est) - p_gt
    t_rmse = math.sqrt(float(np.mean(np.einsum("ni,ni->n", residual, residual))))
    angles = np.array([rotation_angle_between(align.rotation @ e.rotation, g.rotation)
                       for e, g in zip(est_poses, gt_poses)])
    r_rmse = math.degrees(math.sqrt(float(np.mean(angles**2))))
    return AteResult(t_rmse, r_rmse, degenerate, align)


@dataclass
class KittiResult:
    translation_percent: float | None
    rotation_deg_per_m: float | None
    num_segments: int
    message: str = ""

    def __iter__(self):
        yield self.translation_percent
        yield self.rotation_deg_per_m


def kitti_relative(est_poses: list[RigidTransform], gt_poses: list[RigidTransform],
                   lengths=KITTI_SEGMENT_LENGTHS) -> KittiResult:
    """Segment-based relative error over ground-truth path lengths.

    Every start index is used.  Each segment ends at the first pose whose
    ground-truth arc length exceeds the start's by the segment length.
    """
    if len(est_poses) != len(gt_poses):
        raise ValueError("pose lists differ in length")
    p_gt = np.array([p.translation for p in gt_poses]).reshape(-1, 3)
    steps = np.linalg.norm(np.diff(p_gt, axis=0), axis=1) if len(p_gt) > 1 else np.zeros(0)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    if dist[-1] < min(lengths):
        return KittiResult(None, None, 0, f"path length {dist[-1]:.1f} m is shorter than {min(lengths)} m")
    t_errs, r_errs = [], []
    for length in lengths:
        ends = np.searchsorted(dist, dist + length, side="right")
        for first, last in enumerate(ends):
            if last >= len(dist):
                break
            delta_gt = gt_poses[first].inverse() @ gt_poses[last]
            delta_est = est_poses[first].inverse() @ est_poses[last]
            err = delta_est.inverse() @ delta_gt
            t_errs.append(np.linalg.norm(err.translation) / length)
            r_errs.append(rotation_angle_between(delta_est.rotation, delta_gt.rotation) / length)
    if not t_errs:
        return KittiResult(None, None, 0, "no complete segments")
    return KittiResult(100.0 * float(np.mean(t_errs)), math.degrees(float(np.mean(r_errs))), len(t_errs))


@dataclass
class MetricReport:
    ate_translation_rmse: float
    ate_rotation_rmse: float
    kitti_rel_translation: float | None
    kitti_rel_rotation: float | None
    num_pairs: int
    kitti_segments: int = 0
    notes: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        rows = [
            f"pairs                    {self.num_pairs}",
            f"ATE translation RMSE [m] {self.ate_translation_rmse:.6f}",
            f"ATE rotation RMSE [deg]  {self.ate_rotation_rmse:.6f}",
        ]
        if self.kitti_rel_translation is not None:
            rows.append(f"KITTI rel. transl. [%]   {self.kitti_rel_translation:.6f}")
            rows.append(f"KITTI rel. rot. [deg/m]  {self.kitti_rel_rotation:.8f}")
        if self.notes:
            rows.append(f"notes: {self.notes}")
        return "\n".join(rows) + "\n"


def evaluate(est: Trajectory, gt: Trajectory, max_dt: float = 0.01) -> MetricReport:
    e_idx, g_idx = associate(est, gt, max_dt)
    est_poses = [est.poses[i] for i in e_idx]
    gt_poses = [gt.poses[i] for i in g_idx]
    ate_res = ate(est_poses, gt_poses)
    kitti = kitti_relative(est_poses, gt_poses)
    notes = []
    if ate_res.degenerate:
        notes.append("degenerate ATE alignment, identity used")
    if kitti.message:
        notes.append(kitti.message)
    return MetricReport(ate_res.translation_rmse, ate_res.rotation_rmse_deg,
                        kitti.translation_percent, kitti.rotation_deg_per_m,
                        len(e_idx), kitti.num_segments, "; ".join(notes))
