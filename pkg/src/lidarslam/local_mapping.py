"""Keypose-anchored local maps and the distance-based splitting policy."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, TimedPointCloud
from .voxel_map import VoxelHashMap

MIN_POINTS_FOR_PCA = 3


@dataclass
class VoxelStats:
    means: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.means)


@dataclass
class LocalMap:
    id: int
    keypose: RigidTransform
    grid: VoxelHashMap
    local_trajectory: list[RigidTransform] = field(default_factory=list)
    voxel_stats: VoxelStats | None = None
    start_scan_index: int = 0
    end_scan_index: int = -1

    @classmethod
    def empty(cls, map_id: int, keypose: RigidTransform, voxel_size: float,
              max_points_per_voxel: int = 20, start_scan_index: int = 0) -> LocalMap:
        return cls(map_id, keypose, VoxelHashMap(voxel_size, max_points_per_voxel),
                   start_scan_index=start_scan_index, end_scan_index=start_scan_index - 1)

    @property
    def finalized(self) -> bool:
        return self.voxel_stats is not None

    def global_poses(self) -> list[RigidTransform]:
        return [self.keypose @ p for p in self.local_trajectory]

    def points(self) -> np.ndarray:
        return self.grid.points()


@dataclass(frozen=True)
class SplitPolicy:
    distance_threshold_beta: float = 100.0

    def __post_init__(self):
        if not self.distance_threshold_beta > 0:
            raise ValueError("distance_threshold_beta must be positive")


def integrate(local_map: LocalMap, pose_in_keypose_frame: RigidTransform, frame: TimedPointCloud) -> LocalMap:
    local_map.grid.insert(pose_in_keypose_frame.apply(frame.points))
    local_map.local_trajectory.append(pose_in_keypose_frame)
    local_map.end_scan_index += 1
    return local_map


def traveled_distance(trajectory: list[RigidTransform]) -> float:
    if len(trajectory) < 2:
        return 0.0
    t = np.array([p.translation for p in trajectory])
    return float(np.linalg.norm(np.diff(t, axis=0), axis=1).sum())


def should_split(local_map: LocalMap, policy: SplitPolicy) -> bool:
    return traveled_distance(local_map.local_trajectory) > policy.distance_threshold_beta


def compute_voxel_stats(grid: VoxelHashMap) -> VoxelStats:
    """Per-voxel mean and PCA normal for voxels holding at least three points."""
    _, blocks, counts = grid.voxel_blocks()
    sel = counts >= MIN_POINTS_FOR_PCA
    if not sel.any():
        return VoxelStats(np.zeros((0, 3)), np.zeros((0, 3)))
    blocks, counts = blocks[sel], counts[sel]
    valid = (np.arange(blocks.shape[1])[None, :] < counts[:, None]).astype(float)
    means = (blocks * valid[..., None]).sum(axis=1) / counts[:, None]
    centered = (blocks - means[:, None, :]) * valid[..., None]
    cov = np.einsum("vni,vnj->vij", centered, centered) / counts[:, None, None]
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return VoxelStats(means, _canonical_sign(normals))


def _canonical_sign(normals: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    sign = np.ones(len(normals))
    undecided = np.ones(len(normals), dtype=bool)
    for axis in (2, 1, 0):
        c = normals[:, axis]
        decide = undecided & (np.abs(c) > eps)
        sign[decide] = np.where(c[decide] < 0, -1.0, 1.0)
        undecided &= ~decide
    return normals * sign[:, None]


def finalize(local_map: LocalMap) -> LocalMap:
    if local_map.grid.empty():
        raise ValueError("cannot finalize an empty local map")
    local_map.voxel_stats = compute_voxel_stats(local_map.grid)
    return local_map


def split(local_map: LocalMap, crop_radius: float) -> tuple[LocalMap, LocalMap]:
    """Finalize ``local_map`` and start the next one at its last pose.

    The fresh grid is seeded with the old points within ``crop_radius`` of
    the new keypose origin, expressed in the new keypose frame.
    """
    if not local_map.local_trajectory:
        raise ValueError("cannot split a local map without poses")
    last = local_map.local_trajectory[-1]
    finalized = finalize(local_map)
    grid = local_map.grid.crop(last.translation, crop_radius).transformed(last.inverse())
    fresh = LocalMap(
        id=local_map.id + 1,
        keypose=local_map.keypose @ last,
        grid=grid,
        local_trajectory=[RigidTransform.identity()],
        start_scan_index=local_map.end_scan_index,
        end_scan_index=local_map.end_scan_index,
    )
    return finalized, fresh


def save_local_map(local_map: LocalMap, path: str | Path) -> None:
    """Write a local map as ``.npz`` (see README for the field layout)."""
    stats = local_map.voxel_stats
    np.savez(
        path,
        id=local_map.id,
        keypose=local_map.keypose.matrix(),
        local_trajectory=np.array([p.matrix() for p in local_map.local_trajectory]).reshape(-1, 4, 4),
        points=local_map.points(),
        voxel_size=local_map.grid.voxel_size,
        max_points_per_voxel=local_map.grid.max_points_per_voxel,
        scan_range=np.array([local_map.start_scan_index, local_map.end_scan_index]),
        means=np.zeros((0, 3)) if stats is None else stats.means,
        normals=np.zeros((0, 3)) if stats is None else stats.normals,
        finalized=stats is not None,
    )


def load_local_map(path: str | Path) -> LocalMap:
    with np.load(path) as data:
        grid = VoxelHashMap(float(data["voxel_size"]), int(data["max_points_per_voxel"]))
        grid.insert(data["points"])
        stats = VoxelStats(data["means"], data["normals"]) if bool(data["finalized"]) else None
        return LocalMap(
            id=int(data["id"]),
            keypose=RigidTransform.from_matrix(data["keypose"]),
            grid=grid,
            local_trajectory=[RigidTransform.from_matrix(m) for m in data["local_trajectory"]],
            voxel_stats=stats,
            start_scan_index=int(data["scan_range"][0]),
            end_scan_index=int(data["scan_range"][1]),
        )
