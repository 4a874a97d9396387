"""3D log-odds occupancy grid, horizontal 2D slices and PGM/YAML map export."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from numba import njit, types
from numba.typed import Dict

from .geometry import RigidTransform, TimedPointCloud, pack_keys

_OFFSET = 1 << 20
FREE_PIXEL = 254
OCCUPIED_PIXEL = 0
UNKNOWN_PIXEL = 205


@njit(cache=True, inline="always")
def _code(kx, ky, kz):
    return ((kx + _OFFSET) << 42) | ((ky + _OFFSET) << 21) | (kz + _OFFSET)


@njit(cache=True, inline="always")
def _update(log_odds, code, delta, lo, hi):
    v = log_odds.get(code, 0.0) + delta
    if v < lo:
        v = lo
    elif v > hi:
        v = hi
    log_odds[code] = v


@njit(cache=True)
def _traverse(ox, oy, oz, ex, ey, ez, voxel, out):
    """Amanatides-Woo voxel walk from origin to endpoint (both voxels included).

    Writes voxel coordinates into ``out`` and returns how many were written.
    """
    cx = int(math.floor(ox / voxel))
    cy = int(math.floor(oy / voxel))
    cz = int(math.floor(oz / voxel))
    tx = int(math.floor(ex / voxel))
    ty = int(math.floor(ey / voxel))
    tz = int(math.floor(ez / voxel))
    dx, dy, dz = ex - ox, ey - oy, ez - oz
    sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
    sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
    sz = 1 if dz > 0 else (-1 if dz < 0 else 0)
    inf = np.inf
    if sx != 0:
        nx = (cx + (1 if sx > 0 else 0)) * voxel
        tmx = (nx - ox) / dx
        tdx = voxel / abs(dx)
    else:
        tmx = inf
        tdx = inf
    if sy != 0:
        ny = (cy + (1 if sy > 0 else 0)) * voxel
        tmy = (ny - oy) / dy
        tdy = voxel / abs(dy)
    else:
        tmy = inf
        tdy = inf
    if sz != 0:
        nz = (cz + (1 if sz > 0 else 0)) * voxel
        tmz = (nz - oz) / dz
        tdz = voxel / abs(dz)
    else:
        tmz = inf
        tdz = inf
    limit = abs(tx - cx) + abs(ty - cy) + abs(tz - cz) + 1
    n = 0
    while n < out.shape[0]:
        out[n, 0] = cx
        out[n, 1] = cy
        out[n, 2] = cz
        n += 1
        if (cx == tx and cy == ty and cz == tz) or n >= limit:
            break
        if tmx <= tmy and tmx <= tmz:
            if tmx > 1.0:
                break
            cx += sx
            tmx += tdx
        elif tmy <= tmz:
            if tmy > 1.0:
                break
            cy += sy
            tmy += tdy
        else:
            if tmz > 1.0:
                break
            cz += sz
            tmz += tdz
    return n


@njit(cache=True)
def _integrate(log_odds, origin, endpoints, hit_flags, voxel, hit, miss, lo, hi):
    buf = np.empty((1 << 16, 3), dtype=np.int64)
    for i in range(endpoints.shape[0]):
        n = _traverse(origin[0], origin[1], origin[2],
                      endpoints[i, 0], endpoints[i, 1], endpoints[i, 2], voxel, buf)
        ex = int(math.floor(endpoints[i, 0] / voxel))
        ey = int(math.floor(endpoints[i, 1] / voxel))
        ez = int(math.floor(endpoints[i, 2] / voxel))
        for k in range(n):
            if hit_flags[i] and buf[k, 0] == ex and buf[k, 1] == ey and buf[k, 2] == ez:
                continue
            _update(log_odds, _code(buf[k, 0], buf[k, 1], buf[k, 2]), miss, lo, hi)
        if hit_flags[i]:
            _update(log_odds, _code(ex, ey, ez), hit, lo, hi)


def traverse(origin, endpoint, voxel_size: float) -> np.ndarray:
    """Voxel coordinates visited by the segment, origin voxel first, endpoint voxel last."""
    buf = np.empty((1 << 16, 3), dtype=np.int64)
    n = _traverse(*(float(v) for v in origin), *(float(v) for v in endpoint), float(voxel_size), buf)
    return buf[:n].copy()


def unpack_codes(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    mask = np.int64((1 << 21) - 1)
    return np.stack([(codes >> 42) & mask, (codes >> 21) & mask, codes & mask], axis=1) - _OFFSET


def probability(log_odds):
    return 1.0 / (1.0 + np.exp(-np.asarray(log_odds, dtype=float)))


class OccupancyGrid3D:
    def __init__(self, voxel_size: float = 0.05, hit: float = 0.85, miss: float = -0.4,
                 clamp_min: float = -2.0, clamp_max: float = 3.5):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.hit, self.miss = float(hit), float(miss)
        self.clamp_min, self.clamp_max = float(clamp_min), float(clamp_max)
        self.log_odds = Dict.empty(key_type=types.int64, value_type=types.float64)

    @classmethod
    def from_config(cls, config) -> OccupancyGrid3D:
        return cls(config.voxel_size, config.hit, config.miss, config.clamp_min, config.clamp_max)

    def __len__(self) -> int:
        return len(self.log_odds)

    def integrate(self, sensor_pose: RigidTransform, scan: TimedPointCloud | np.ndarray,
                  max_range: float) -> OccupancyGrid3D:
        points = scan.points if isinstance(scan, TimedPointCloud) else np.asarray(scan, dtype=float)
        points = points.reshape(-1, 3)
        if len(points) == 0:
            return self
        ranges = np.linalg.norm(points, axis=1)
        keep = ranges > 0
        points, ranges = points[keep], ranges[keep]
        hit_flags = ranges <= max_range
        clipped = np.where(hit_flags[:, None], points, points * (max_range / ranges)[:, None])
        endpoints = np.ascontiguousarray(sensor_pose.apply(clipped))
        _integrate(self.log_odds, np.ascontiguousarray(sensor_pose.translation), endpoints,
                   hit_flags, self.voxel_size, self.hit, self.miss, self.clamp_min, self.clamp_max)
        return self

    def get(self, key) -> float | None:
        code = int(pack_keys(np.asarray(key, dtype=np.int64).reshape(1, 3))[0])
        return self.log_odds.get(code)

    def items(self):
        """``(keys[N, 3], log_odds[N])`` sorted by packed key."""
        if len(self.log_odds) == 0:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0)
        codes = np.fromiter(self.log_odds.keys(), dtype=np.int64, count=len(self.log_odds))
        values = np.fromiter(self.log_odds.values(), dtype=float, count=len(self.log_odds))
        order = np.argsort(codes)
        return unpack_codes(codes[order]), values[order]

    def write_records(self, path: str | Path) -> None:
        """Dump voxel centres with occupancy probability as ``x y z p`` lines."""
        keys, values = self.items()
        centers = (keys + 0.5) * self.voxel_size
        data = np.column_stack([centers, probability(values)])
        np.savetxt(path, data, fmt="%.6f")


@dataclass
class OccupancyGrid2D:
    resolution: float
    origin: np.ndarray
    cells: np.ndarray  # [row = y index, col = x index]; NaN marks unknown

    @property
    def shape(self):
        return self.cells.shape


def slice_2d(grid: OccupancyGrid3D, z_min: float = 0.1, z_max: float = 0.2) -> OccupancyGrid2D:
    """Max occupancy probability per column over voxels whose centre z lies in [z_min, z_max]."""
    if not z_min < z_max:
        raise ValueError("z_min must be < z_max")
    keys, values = grid.items()
    vs = grid.voxel_size
    if len(keys):
        zc = (keys[:, 2] + 0.5) * vs
        sel = (zc >= z_min) & (zc <= z_max)
        keys, values = keys[sel], values[sel]
    if len(keys) == 0:
        return OccupancyGrid2D(vs, np.zeros(2), np.full((1, 1), np.nan))
    lo = keys[:, :2].min(axis=0)
    hi = keys[:, :2].max(axis=0)
    w, h = (hi - lo + 1).tolist()
    cells = np.full((h, w), np.nan)
    ix = keys[:, 0] - lo[0]
    iy = keys[:, 1] - lo[1]
    probs = probability(values)
    flat = iy * w + ix
    order = np.argsort(flat, kind="stable")
    flat, probs = flat[order], probs[order]
    uniq, start = np.unique(flat, return_index=True)
    maxima = np.maximum.reduceat(probs, start)
    cells.ravel()[uniq] = maxima
    return OccupancyGrid2D(vs, lo.astype(float) * vs, cells)


def classify(cells: np.ndarray, occupied_threshold: float = 0.65, free_threshold: float = 0.196) -> np.ndarray:
    """Trinary map: 1 occupied, 0 free, -1 unknown (includes NaN and in-between values)."""
    out = np.full(cells.shape, -1, dtype=np.int8)
    known = ~np.isnan(cells)
    out[known & (cells > occupied_threshold)] = 1
    out[known & (cells < free_threshold)] = 0
    return out


def export_pgm_yaml(grid2d: OccupancyGrid2D, pgm_path: str | Path, yaml_path: str | Path | None = None,
                    occupied_threshold: float = 0.65, free_threshold: float = 0.196) -> tuple[Path, Path]:
    pgm_path = Path(pgm_path)
    yaml_path = Path(yaml_path) if yaml_path is not None else pgm_path.with_suffix(".yaml")
    labels = classify(grid2d.cells, occupied_threshold, free_threshold)
    image = np.full(labels.shape, UNKNOWN_PIXEL, dtype=np.uint8)
    image[labels == 1] = OCCUPIED_PIXEL
    image[labels == 0] = FREE_PIXEL
    image = image[::-1]  # first image row is the largest y
    h, w = image.shape
    meta = {
        "image": pgm_path.name,
        "resolution": float(grid2d.resolution),
        "origin": [float(grid2d.origin[0]), float(grid2d.origin[1]), 0.0],
        "negate": 0,
        "occupied_thresh": float(occupied_threshold),
        "free_thresh": float(free_threshold),
        "mode": "trinary",
    }
    try:
        with open(pgm_path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(image.tobytes())
        yaml_path.write_text(yaml.safe_dump(meta, sort_keys=False))
    except OSError as exc:
        raise OSError(f"cannot write occupancy map to {pgm_path} / {yaml_path}: {exc}") from exc
    return pgm_path, yaml_path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def import_pgm_yaml(yaml_path: str | Path):
    """Read a map pair back as ``(labels, resolution, origin)``; labels as in ``classify``."""
    yaml_path = Path(yaml_path)
    meta = yaml.safe_load(yaml_path.read_text())
    image = read_pgm(yaml_path.parent / meta["image"])[::-1]
    labels = np.full(image.shape, -1, dtype=np.int8)
    labels[image == OCCUPIED_PIXEL] = 1
    labels[image == FREE_PIXEL] = 0
    return labels, float(meta["resolution"]), np.array(meta["origin"][:2], dtype=float)
