"""Synthetic LiDAR worlds for desk-scale experiments.

The world is the ground plane z = 0 plus yaw-rotated boxes standing on it.
A spinning multi-beam sensor sweeps one column after another while moving,
so every point carries its own capture time and the sweeps are distorted
like real rotating-LiDAR data.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from .evaluation import Trajectory, write_tum
from .geometry import RigidTransform, TimedPointCloud


@dataclass(frozen=True)
class SensorModel:
    name: str
    elevations_deg: tuple
    columns: int
    max_range: float = 100.0
    min_range: float = 0.5
    noise_sigma: float = 0.02
    sweep_duration: float = 0.1

    def directions(self, azimuth_offset: float = 0.0) -> np.ndarray:
        """Unit ray directions, shape (columns, beams, 3), columns in sweep order.

        ``azimuth_offset`` is a fraction of one column; firing is not phase-locked
        to the rotation, so every sweep starts at a slightly different azimuth.
        """
        el = np.radians(np.asarray(self.elevations_deg, dtype=float))
        az = -math.pi + 2.0 * math.pi * (np.arange(self.columns) + azimuth_offset) / self.columns
        ce = np.cos(el)[None, :]
        return np.stack([ce * np.cos(az)[:, None], ce * np.sin(az)[:, None],
                         np.broadcast_to(np.sin(el)[None, :], (self.columns, len(el)))], axis=-1)


def sensor_model(name: str, noise_sigma: float = 0.02) -> SensorModel:
    if name == "beam16":
        return SensorModel(name, tuple(np.linspace(-15.0, 15.0, 16)), 900, noise_sigma=noise_sigma)
    if name == "beam64":
        return SensorModel(name, tuple(np.linspace(2.0, -24.8, 64)), 360, noise_sigma=noise_sigma)
    raise ValueError(f"unknown sensor model {name!r} (beam16, beam64)")


class SuperellipsePath:
    """Closed counter-clockwise loop ``|x/a|^n + |y/b|^n = 1`` with continuous curvature.

    Arc length is tabulated densely; the start is the bottom apex heading +x.
    """

    def __init__(self, a: float, b: float, n: float = 3.0, samples: int = 200_000):
        if not (a > 0 and b > 0 and n >= 2):
            raise ValueError("need a, b > 0 and n >= 2")
        self.a, self.b, self.n = a, b, n
        phi = np.linspace(-0.5 * math.pi, 1.5 * math.pi, samples + 1)
        c, s = np.cos(phi), np.sin(phi)
        x = a * np.sign(c) * np.abs(c) ** (2.0 / n)
        y = b * np.sign(s) * np.abs(s) ** (2.0 / n)
        self._s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])
        self._x, self._y = x, y
        heading = np.unwrap(np.arctan2(np.gradient(y), np.gradient(x)))
        heading[0], heading[-1] = 0.0, 2.0 * math.pi
        self._h = heading
        self.length = float(self._s[-1])

    def __call__(self, s: np.ndarray):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        return (np.interp(s, self._s, self._x), np.interp(s, self._s, self._y),
                np.interp(s, self._s, self._h))


class StraightPath:
    length = math.inf

    def __call__(self, s: np.ndarray):
        s = np.asarray(s, dtype=float)
        return s.copy(), np.zeros_like(s), np.zeros_like(s)


@dataclass(frozen=True)
class MotionProfile:
    name: str
    speed: float
    height: float
    acceleration: float = 4.0  # ramp from standstill to ``speed``
    roll_amplitude_deg: float = 0.0
    pitch_amplitude_deg: float = 0.0
    bob_amplitude: float = 0.0


MOTION_PROFILES = {
    "car": MotionProfile("car", speed=16.5, height=1.8, acceleration=4.0),
    "handheld": MotionProfile("handheld", speed=1.5, height=1.4, acceleration=1.0, roll_amplitude_deg=4.0,
                              pitch_amplitude_deg=3.0, bob_amplitude=0.03),
}


@dataclass
class WorldSpec:
    sensor: str = "beam64"
    motion: str = "car"
    trajectory: str = "loop"  # loop | straight
    num_scans: int = 400
    speed: float | None = None  # overrides the motion profile speed
    noise_sigma: float = 0.02
    loop_size: tuple | None = None  # (a, b, n) of the superellipse
    num_boxes: int | None = None
    start_from_rest: bool = True
    azimuth_jitter: bool = True  # random firing phase per sweep; off gives repeatable sweeps

    def profile(self) -> MotionProfile:
        try:
            base = MOTION_PROFILES[self.motion]
        except KeyError:
            raise ValueError(f"unknown motion profile {self.motion!r}") from None
        return dataclasses.replace(base, speed=base.speed if self.speed is None else self.speed,
                                   acceleration=base.acceleration if self.start_from_rest else math.inf)

    def path(self):
        if self.trajectory == "straight":
            return StraightPath()
        if self.trajectory != "loop":
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.loop_size is not None:
            return SuperellipsePath(*self.loop_size)
        if self.motion == "handheld":
            return SuperellipsePath(9.0, 6.0, 3.0)
        return SuperellipsePath(100.0, 56.0, 3.0)


@dataclass
class BoxWorld:
    centers: np.ndarray  # (B, 2) xy
    half_sizes: np.ndarray  # (B, 2)
    heights: np.ndarray  # (B,)
    yaws: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.heights)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest world surface."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        best = np.abs(points[:, 2])
        for c, h, height, yaw in zip(self.centers, self.half_sizes, self.heights, self.yaws):
            cy, sy = math.cos(yaw), math.sin(yaw)
            dx, dy = points[:, 0] - c[0], points[:, 1] - c[1]
            local = np.column_stack([cy * dx + sy * dy, -sy * dx + cy * dy, points[:, 2] - height / 2])
            half = np.array([h[0], h[1], height / 2])
            q = np.abs(local) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            best = np.minimum(best, np.abs(outside + inside))
        return best


def distance_along(profile: MotionProfile, times: np.ndarray) -> np.ndarray:
    """Distance covered when accelerating uniformly from rest up to the cruise speed."""
    v, acc = profile.speed, profile.acceleration
    if not math.isfinite(acc) or v == 0:
        return v * times
    t_ramp = v / acc
    return np.where(times < t_ramp, 0.5 * acc * times**2, 0.5 * v * t_ramp + v * (times - t_ramp))


def _sample_poses(path, profile: MotionProfile, times: np.ndarray):
    x, y, heading = path(distance_along(profile, times))
    roll = np.radians(profile.roll_amplitude_deg) * np.sin(2 * math.pi * 0.5 * times)
    pitch = np.radians(profile.pitch_amplitude_deg) * np.sin(2 * math.pi * 0.3 * times + 1.0)
    z = profile.height + profile.bob_amplitude * np.sin(2 * math.pi * 1.8 * times)
    rot = Rotation.from_euler("ZYX", np.column_stack([heading, pitch, roll])).as_matrix()
    return rot, np.column_stack([x, y, z])


# per profile: (spacing m, lateral offset range, half-size range, height range) for buildings,
# poles, then objects lower than the sensor whose tops are visible
_LAYOUT = {
    "car": [(3.5, (8.0, 28.0), (1.5, 6.0), (3.0, 15.0)), (12.0, (5.5, 7.5), (0.15, 0.3), (3.0, 6.0)),
            (6.0, (4.0, 9.0), (0.8, 2.4), (0.6, 1.5))],
    "handheld": [(1.0, (2.0, 6.0), (0.2, 1.0), (0.8, 3.0)), (3.0, (1.2, 2.0), (0.05, 0.12), (1.5, 2.5)),
                 (3.0, (7.0, 14.0), (1.0, 4.0), (3.0, 10.0))],
}


def _place_boxes(rng: np.random.Generator, path, profile: MotionProfile, count: int | None) -> BoxWorld:
    layout = _LAYOUT["car" if profile.name == "car" else "handheld"]
    clearance = 2.5 if profile.name == "car" else 0.6
    length = path.length if math.isfinite(path.length) else 2000.0
    route_s = np.arange(0.0, length, 0.25)
    rx, ry, _ = path(route_s)
    route = np.column_stack([rx, ry])
    centers, halves, heights, yaws = [], [], [], []
    for k, (spacing, offsets, sizes, tall) in enumerate(layout):
        wanted = int(length / spacing) if count is None else (count if k == 0 else 0)
        placed = attempts = 0
        while placed < wanted and attempts < 20 * wanted:
            attempts += 1
            s = rng.uniform(0.0, length)
            px, py, h = (v[0] for v in path(np.array([s])))
            side = rng.choice([-1.0, 1.0])
            off = rng.uniform(*offsets)
            c = np.array([px - side * off * math.sin(h), py + side * off * math.cos(h)])
            half = rng.uniform(*sizes, size=2)
            if np.min(np.linalg.norm(route - c, axis=1)) < np.linalg.norm(half) + clearance:
                continue
            centers.append(c)
            halves.append(half)
            heights.append(rng.uniform(*tall))
            yaws.append(rng.uniform(-math.pi, math.pi))
            placed += 1
    return BoxWorld(np.array(centers).reshape(-1, 2), np.array(halves).reshape(-1, 2),
                    np.array(heights), np.array(yaws))


@njit(cache=True)
def _cast(origins, directions, max_range, centers, half_sizes, heights, yaws, out, out_cos):
    n = directions.shape[0]
    nb = centers.shape[0]
    cos_y = np.cos(yaws)
    sin_y = np.sin(yaws)
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = directions[i, 0], directions[i, 1], directions[i, 2]
        best = np.inf
        best_cos = 0.0
        if dz < 0.0 and oz > 0.0:
            best = -oz / dz
            best_cos = -dz
        for b in range(nb):
            c, s = cos_y[b], sin_y[b]
            px, py = ox - centers[b, 0], oy - centers[b, 1]
            lo = (c * px + s * py, -s * px + c * py, oz - 0.5 * heights[b])
            ld = (c * dx + s * dy, -s * dx + c * dy, dz)
            half = (half_sizes[b, 0], half_sizes[b, 1], 0.5 * heights[b])
            tmin, tmax = -np.inf, np.inf
            axis = -1
            miss = False
            for a in range(3):
                if ld[a] == 0.0:
                    if abs(lo[a]) > half[a]:
                        miss = True
                        break
                else:
                    t1 = (-half[a] - lo[a]) / ld[a]
                    t2 = (half[a] - lo[a]) / ld[a]
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tmin:
                        tmin = t1
                        axis = a
                    tmax = min(tmax, t2)
            if not miss and tmax >= tmin and tmin > 0.0 and tmin < best:
                best = tmin
                best_cos = abs(ld[axis])
        out[i] = best if best <= max_range else np.inf
        out_cos[i] = best_cos


def cast_rays(world: BoxWorld, origins: np.ndarray, directions: np.ndarray, max_range: float,
              return_incidence: bool = False):
    """First hit distance along each ray (inf when nothing is hit within max_range).

    With ``return_incidence`` also returns |cos| of the angle between ray and surface normal.
    """
    origins = np.ascontiguousarray(origins, dtype=float)
    directions = np.ascontiguousarray(directions, dtype=float)
    near = np.zeros(0, dtype=np.int64)
    if len(world):
        # origins of one sweep lie close together; a sparse subset plus the spread suffices
        sub = origins[:: max(1, len(origins) // 64), :2]
        spread = np.linalg.norm(origins[:, :2] - sub[0], axis=1).max()
        reach = np.linalg.norm(world.centers[:, None, :] - sub[None, :, :], axis=2).min(axis=1)
        near = np.flatnonzero(reach - np.hypot(*world.half_sizes.T) <= max_range + spread)
    out = np.empty(len(directions))
    cos = np.empty(len(directions))
    _cast(origins, directions, float(max_range), np.ascontiguousarray(world.centers[near]),
          np.ascontiguousarray(world.half_sizes[near]), world.heights[near], world.yaws[near], out, cos)
    return (out, cos) if return_incidence else out


GROUND_REFLECTIVITY = 0.35  # relative to box surfaces


def detectable(ranges: np.ndarray, incidence_cos: np.ndarray, max_range: float,
               reflectivity: np.ndarray | float = 1.0) -> np.ndarray:
    """Returned power ~ reflectivity * cos(incidence) / r^2 must reach that of a head-on box face at max_range."""
    return np.isfinite(ranges) & (reflectivity * incidence_cos * max_range**2 >= ranges**2)


@dataclass
class SyntheticDataset:
    spec: WorldSpec
    world: BoxWorld
    scans: list[TimedPointCloud]
    stamps: np.ndarray
    ground_truth: Trajectory
    files: list[Path] = field(default_factory=list)


def generate_synthetic_world(seed: int, spec: WorldSpec | None = None,
                             output_dir: str | Path | None = None) -> SyntheticDataset:
    """Simulate ``spec.num_scans`` sweeps; ground-truth poses are the sensor poses at mid-sweep.

    With ``output_dir`` the scans are written as ``scan_NNNNNN.npz`` next to
    ``groundtruth.txt`` (TUM) and ``world.json``.
    """
    spec = spec or WorldSpec()
    sensor = sensor_model(spec.sensor, spec.noise_sigma)
    profile = spec.profile()
    path = spec.path()
    rng = np.random.default_rng(seed)
    world = _place_boxes(rng, path, profile, spec.num_boxes)
    cols, beams = sensor.columns, len(sensor.elevations_deg)
    dt = sensor.sweep_duration
    scans, stamps, gt = [], [], []
    for k in range(spec.num_scans):
        rng_k = np.random.default_rng([seed, k])
        offset = rng_k.uniform() if spec.azimuth_jitter else 0.0
        dirs = sensor.directions(offset)
        frac = (np.arange(cols) + offset) / cols
        t0 = k * dt
        rot, pos = _sample_poses(path, profile, t0 + frac * dt)
        world_dirs = np.einsum("cij,cbj->cbi", rot, dirs).reshape(-1, 3)
        origins = np.repeat(pos, beams, axis=0)
        ranges, incidence = cast_rays(world, origins, world_dirs, sensor.max_range, return_incidence=True)
        on_ground = np.abs(origins[:, 2] + ranges * world_dirs[:, 2]) < 1e-6
        hit = detectable(ranges, incidence, sensor.max_range, np.where(on_ground, GROUND_REFLECTIVITY, 1.0))
        ranges = ranges + rng_k.normal(0.0, sensor.noise_sigma, size=ranges.shape) if sensor.noise_sigma > 0 else ranges
        hit &= ranges > sensor.min_range
        pts = ranges[hit, None] * dirs.reshape(-1, 3)[hit]
        times = np.repeat(frac, beams)[hit]
        scans.append(TimedPointCloud(pts, times))
        stamps.append(t0 + 0.5 * dt)
        r_mid, p_mid = _sample_poses(path, profile, np.array([t0 + 0.5 * dt]))
        gt.append(RigidTransform(r_mid[0], p_mid[0]))
    stamps = np.array(stamps)
    dataset = SyntheticDataset(spec, world, scans, stamps, Trajectory(stamps, gt))
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        from .io import write_synth_scan

        for k, (scan, stamp) in enumerate(zip(scans, stamps)):
            f = out / f"scan_{k:06d}.npz"
            write_synth_scan(f, scan, stamp)
            dataset.files.append(f)
        write_tum(dataset.ground_truth, out / "groundtruth.txt")
        meta = {"seed": seed, "spec": asdict(spec), "boxes": {
            "centers": world.centers.tolist(), "half_sizes": world.half_sizes.tolist(),
            "heights": world.heights.tolist(), "yaws": world.yaws.tolist()}}
        (out / "world.json").write_text(json.dumps(meta, indent=1))
    return dataset
