"""Sparse voxel hash grid with bounded points per voxel.

Storage is an open-addressing hash table over packed voxel coordinates plus
dense per-voxel point blocks, so the hot loops (insert, nearest neighbour)
run as compiled kernels.  Every stored point carries a global insertion
sequence number; nearest-neighbour ties are broken by it.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .geometry import RigidTransform

_EMPTY = -1
_OFFSET = 1 << 20
_HASH_MUL = -7046029254386353131  # 0x9E3779B97F4A7C15 as signed int64


@njit(cache=True, inline="always")
def _pack(kx, ky, kz):
    return ((kx + _OFFSET) << 42) | ((ky + _OFFSET) << 21) | (kz + _OFFSET)


@njit(cache=True, inline="always")
def _slot_of(code, mask):
    h = (code ^ (code >> 31)) * _HASH_MUL
    return (h ^ (h >> 29)) & mask


@njit(cache=True)
def _lookup(table_codes, table_voxels, code):
    mask = table_codes.shape[0] - 1
    s = _slot_of(code, mask)
    while True:
        c = table_codes[s]
        if c == code:
            return table_voxels[s]
        if c == _EMPTY:
            return -1
        s = (s + 1) & mask


@njit(cache=True)
def _lookup_many(table_codes, table_voxels, codes, out):
    for i in range(codes.shape[0]):
        out[i] = _lookup(table_codes, table_voxels, codes[i])


@njit(cache=True)
def _rehash(table_codes, table_voxels, vox_codes, n_vox):
    mask = table_codes.shape[0] - 1
    for v in range(n_vox):
        s = _slot_of(vox_codes[v], mask)
        while table_codes[s] != _EMPTY:
            s = (s + 1) & mask
        table_codes[s] = vox_codes[v]
        table_voxels[s] = v


@njit(cache=True)
def _insert(points, voxel_size, table_codes, table_voxels, vox_codes, vox_pts, vox_cnt, vox_seq,
            n_vox, next_seq):
    mask = table_codes.shape[0] - 1
    cap = vox_pts.shape[1]
    for i in range(points.shape[0]):
        kx = int(math.floor(points[i, 0] / voxel_size))
        ky = int(math.floor(points[i, 1] / voxel_size))
        kz = int(math.floor(points[i, 2] / voxel_size))
        code = _pack(kx, ky, kz)
        s = _slot_of(code, mask)
        v = -1
        while True:
            c = table_codes[s]
            if c == code:
                v = table_voxels[s]
                break
            if c == _EMPTY:
                v = n_vox
                table_codes[s] = code
                table_voxels[s] = v
                vox_codes[v] = code
                vox_cnt[v] = 0
                n_vox += 1
                break
            s = (s + 1) & mask
        n = vox_cnt[v]
        if n < cap:
            vox_pts[v, n, 0] = points[i, 0]
            vox_pts[v, n, 1] = points[i, 1]
            vox_pts[v, n, 2] = points[i, 2]
            vox_seq[v, n] = next_seq
            vox_cnt[v] = n + 1
            next_seq += 1
    return n_vox, next_seq


@njit(cache=True)
def _nearest(queries, voxel_size, shells, max_dist, table_codes, table_voxels, vox_pts, vox_cnt,
             vox_seq, out_pts, out_dist, out_seq):
    max_d2 = max_dist * max_dist
    for i in range(queries.shape[0]):
        qx, qy, qz = queries[i, 0], queries[i, 1], queries[i, 2]
        kx = int(math.floor(qx / voxel_size))
        ky = int(math.floor(qy / voxel_size))
        kz = int(math.floor(qz / voxel_size))
        best_d2 = np.inf
        best_seq = -1
        bv = -1
        bj = -1
        for dx in range(-shells, shells + 1):
            for dy in range(-shells, shells + 1):
                for dz in range(-shells, shells + 1):
                    v = _lookup(table_codes, table_voxels, _pack(kx + dx, ky + dy, kz + dz))
                    if v < 0:
                        continue
                    for j in range(vox_cnt[v]):
                        ex = vox_pts[v, j, 0] - qx
                        ey = vox_pts[v, j, 1] - qy
                        ez = vox_pts[v, j, 2] - qz
                        d2 = ex * ex + ey * ey + ez * ez
                        if d2 > max_d2:
                            continue
                        sq = vox_seq[v, j]
                        if d2 < best_d2 or (d2 == best_d2 and sq < best_seq):
                            best_d2 = d2
                            best_seq = sq
                            bv = v
                            bj = j
        out_seq[i] = best_seq
        if bv >= 0:
            out_pts[i, 0] = vox_pts[bv, bj, 0]
            out_pts[i, 1] = vox_pts[bv, bj, 1]
            out_pts[i, 2] = vox_pts[bv, bj, 2]
            out_dist[i] = math.sqrt(best_d2)
        else:
            out_dist[i] = np.inf


class VoxelHashMap:
    """Voxel grid of points; at most ``max_points_per_voxel`` kept per voxel.

    Inserts beyond the per-voxel cap are silently dropped.  Read operations
    (``nearest_neighbors``, ``crop``, ``points``) do not mutate the map.
    """

    def __init__(self, voxel_size: float, max_points_per_voxel: int = 20):
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        if max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        self.voxel_size = float(voxel_size)
        self.max_points_per_voxel = int(max_points_per_voxel)
        self.clear()

    def clear(self) -> None:
        self._n_vox = 0
        self._next_seq = 0
        self._alloc(64)

    def _alloc(self, voxel_capacity: int) -> None:
        table_size = 1 << max(7, int(math.ceil(math.log2(2 * voxel_capacity))))
        self._table_codes = np.full(table_size, _EMPTY, dtype=np.int64)
        self._table_voxels = np.full(table_size, -1, dtype=np.int64)
        self._vox_codes = np.zeros(voxel_capacity, dtype=np.int64)
        self._vox_pts = np.zeros((voxel_capacity, self.max_points_per_voxel, 3))
        self._vox_cnt = np.zeros(voxel_capacity, dtype=np.int64)
        self._vox_seq = np.zeros((voxel_capacity, self.max_points_per_voxel), dtype=np.int64)

    def _reserve(self, extra: int) -> None:
        needed = self._n_vox + extra
        if needed <= self._vox_codes.shape[0]:
            return
        n = self._n_vox
        codes = self._vox_codes[:n].copy()
        pts = self._vox_pts[:n].copy()
        cnt = self._vox_cnt[:n].copy()
        seq = self._vox_seq[:n].copy()
        self._alloc(max(needed, 2 * self._vox_codes.shape[0]))
        self._vox_codes[:n] = codes
        self._vox_pts[:n] = pts
        self._vox_cnt[:n] = cnt
        self._vox_seq[:n] = seq
        _rehash(self._table_codes, self._table_voxels, self._vox_codes, n)

    def insert(self, points: np.ndarray) -> None:
        points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return
        self._reserve(len(points))
        self._n_vox, self._next_seq = _insert(
            points, self.voxel_size, self._table_codes, self._table_voxels,
            self._vox_codes, self._vox_pts, self._vox_cnt, self._vox_seq,
            self._n_vox, self._next_seq,
        )

    def __len__(self) -> int:
        return int(self._vox_cnt[: self._n_vox].sum())

    @property
    def num_voxels(self) -> int:
        return self._n_vox

    def empty(self) -> bool:
        return self._n_vox == 0

    def shells_for(self, max_distance: float) -> int:
        return max(1, int(math.ceil(max_distance / self.voxel_size)))

    def nearest_neighbors(self, queries: np.ndarray, max_distance: float):
        """Batch nearest-neighbour search.

        Returns ``(points, distances, sequence_ids)``; rows with no neighbour
        within ``max_distance`` have distance ``inf`` and sequence id -1.
        """
        if max_distance <= 0:
            raise ValueError("max_distance must be positive")
        queries = np.ascontiguousarray(queries, dtype=float).reshape(-1, 3)
        n = len(queries)
        out_pts = np.zeros((n, 3))
        out_dist = np.full(n, np.inf)
        out_seq = np.full(n, -1, dtype=np.int64)
        if self._n_vox and n:
            _nearest(queries, self.voxel_size, self.shells_for(max_distance), float(max_distance),
                     self._table_codes, self._table_voxels, self._vox_pts, self._vox_cnt,
                     self._vox_seq, out_pts, out_dist, out_seq)
        return out_pts, out_dist, out_seq

    def nearest_neighbor(self, query, max_distance: float):
        """Closest stored point within ``max_distance`` as ``(point, distance)``, or None."""
        pts, dist, seq = self.nearest_neighbors(np.asarray(query, dtype=float)[None], max_distance)
        if seq[0] < 0:
            return None
        return pts[0], float(dist[0])

    def _flat(self):
        n = self._n_vox
        valid = np.arange(self.max_points_per_voxel)[None, :] < self._vox_cnt[:n, None]
        pts = self._vox_pts[:n][valid]
        seq = self._vox_seq[:n][valid]
        order = np.argsort(seq, kind="stable")
        return pts[order], seq[order]

    def points(self) -> np.ndarray:
        """All stored points in insertion order."""
        return self._flat()[0]

    def voxel_blocks(self):
        """Per-voxel point blocks ``(codes, points[V, cap, 3], counts[V])``, voxels in creation order."""
        n = self._n_vox
        return self._vox_codes[:n], self._vox_pts[:n], self._vox_cnt[:n]

    def occupied_codes(self) -> np.ndarray:
        return self._vox_codes[: self._n_vox].copy()

    def contains_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.ascontiguousarray(codes, dtype=np.int64)
        out = np.empty(len(codes), dtype=np.int64)
        _lookup_many(self._table_codes, self._table_voxels, codes, out)
        return out >= 0

    def crop(self, center, radius: float) -> VoxelHashMap:
        """New map holding exactly the points within ``radius`` of ``center``."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        pts, _ = self._flat()
        keep = np.linalg.norm(pts - np.asarray(center, dtype=float), axis=1) <= radius
        out = VoxelHashMap(self.voxel_size, self.max_points_per_voxel)
        out.insert(pts[keep])
        return out

    def transformed(self, t: RigidTransform) -> VoxelHashMap:
        """Copy with every point mapped through ``t`` and re-keyed."""
        out = VoxelHashMap(self.voxel_size, self.max_points_per_voxel)
        out.insert(t.apply(self.points()))
        return out

    def copy(self) -> VoxelHashMap:
        out = VoxelHashMap(self.voxel_size, self.max_points_per_voxel)
        out._n_vox, out._next_seq = self._n_vox, self._next_seq
        for name in ("_table_codes", "_table_voxels", "_vox_codes", "_vox_pts", "_vox_cnt", "_vox_seq"):
            setattr(out, name, getattr(self, name).copy())
        return out

    def remove_far_voxels(self, center, radius: float) -> None:
        """Drop whole voxels whose first point lies farther than ``radius`` from ``center``."""
        n = self._n_vox
        if n == 0:
            return
        first = self._vox_pts[:n, 0, :]
        keep = np.linalg.norm(first - np.asarray(center, dtype=float), axis=1) <= radius
        if keep.all():
            return
        idx = np.flatnonzero(keep)
        m = len(idx)
        self._vox_codes[:m] = self._vox_codes[idx]
        self._vox_pts[:m] = self._vox_pts[idx]
        self._vox_cnt[:m] = self._vox_cnt[idx]
        self._vox_seq[:m] = self._vox_seq[idx]
        self._n_vox = m
        self._table_codes.fill(_EMPTY)
        self._table_voxels.fill(-1)
        _rehash(self._table_codes, self._table_voxels, self._vox_codes, m)
