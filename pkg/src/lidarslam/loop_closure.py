"""Place recognition between local maps and geometric validation of the matches.

Each finalized local map is levelled on its ground plane, rendered as a
bird's-eye density image and described with oriented binary features.
Candidates found by descriptor matching and 2D RANSAC are refined by
point-to-plane ICP on the voxel means and accepted by their overlap
coefficient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureSet, extract_features as _extract, match_descriptors, quantize
from .geometry import RigidTransform, TimedPointCloud, pack_keys, se3_exp, skew, voxel_keys
from .local_mapping import LocalMap, VoxelStats
from .voxel_map import VoxelHashMap

log = logging.getLogger(__name__)

GROUND_MIN_SUPPORT = 0.05
# the ground is the lowest large surface: few points may lie clearly beneath it
GROUND_BELOW_MARGIN = 1.0
GROUND_MAX_BELOW_RATIO = 0.5
# ...and is open: a horizontal slice through walls has structure above every cell
GROUND_COVER_CELL = 0.5
GROUND_COVER_HEIGHT = 0.5
GROUND_MAX_COVERED = 0.6
GROUND_MAX_TILT_DEG = 30.0
GROUND_INLIER_DISTANCE = 0.15
GROUND_RANSAC_ITERATIONS = 300
GROUND_MAX_SAMPLES = 20000
MAX_IMAGE_PIXELS = 4096 * 4096


class GroundAlignmentError(RuntimeError):
    pass


@dataclass
class DensityImage:
    resolution: float
    origin: np.ndarray  # metric xy of the corner of cell (0, 0)
    cells: np.ndarray  # (rows=y, cols=x), values in [0, 1]
    max_count: int = 0

    def __post_init__(self):
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() > 1):
            raise ValueError("density values must lie in [0, 1]")

    def counts(self) -> np.ndarray:
        return np.rint(self.cells * self.max_count).astype(np.int64)

    def pixel_to_metric(self, pixels: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(pixels, dtype=float) + 0.5) * self.resolution


@dataclass
class LoopCandidate:
    source_map_id: int
    target_map_id: int
    initial_guess: RigidTransform
    inlier_count: int

    def __post_init__(self):
        if self.source_map_id == self.target_map_id:
            raise ValueError("a loop candidate needs two different maps")


@dataclass
class ValidatedClosure:
    source_map_id: int
    target_map_id: int
    initial_guess: RigidTransform
    inlier_count: int
    refined_transform: RigidTransform
    overlap: float


@dataclass
class MapDescriptor:
    map_id: int
    ground_transform: RigidTransform
    image: DensityImage
    features: FeatureSet


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    v = np.cross(a, b)
    c = float(a @ b)
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        return np.eye(3)
    k = skew(v / s)
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def _fit_plane(points: np.ndarray):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    return n, -float(n @ centroid)


def _covered_fraction(xy: np.ndarray, on_plane: np.ndarray, above: np.ndarray) -> float:
    cells = pack_keys(np.column_stack([np.floor(xy / GROUND_COVER_CELL).astype(np.int64),
                                       np.zeros(len(xy), dtype=np.int64)]))
    plane_cells = np.unique(cells[on_plane])
    return float(np.isin(plane_cells, cells[above]).mean())


def ground_align(local_map: LocalMap | np.ndarray, seed: int = 0):
    """Level the map on its dominant ground plane.

    Returns ``(ground_transform, aligned_points)``; the transform maps the
    plane to z = 0 while keeping the heading.  Raises GroundAlignmentError
    when the best near-horizontal plane holds less than 5 % of the points,
    has more points far below it than half its own support, or has
    structure directly above most of its cells (a slab cut through walls
    rather than a floor).
    """
    points = local_map if isinstance(local_map, np.ndarray) else local_map.points()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise GroundAlignmentError("too few points for a ground plane")
    rng = np.random.default_rng(seed)
    sample = points
    if len(points) > GROUND_MAX_SAMPLES:
        sample = points[rng.choice(len(points), GROUND_MAX_SAMPLES, replace=False)]
    # ground lies below the sensor: seed hypotheses from the lower half
    low = sample[sample[:, 2] <= np.median(sample[:, 2])]
    if len(low) < 3:
        low = sample
    tri = low[rng.integers(0, len(low), size=(GROUND_RANSAC_ITERATIONS, 3))]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(normals, axis=1)
    ok = norm > 1e-9
    normals[ok] /= norm[ok, None]
    normals[normals[:, 2] < 0] *= -1.0
    ok &= normals[:, 2] >= math.cos(math.radians(GROUND_MAX_TILT_DEG))
    if not ok.any():
        raise GroundAlignmentError("no near-horizontal plane hypothesis")
    normals, tri = normals[ok], tri[ok]
    offsets = -np.einsum("ni,ni->n", normals, tri[:, 0])
    dist = np.abs(sample @ normals.T + offsets[None, :])
    support = (dist < GROUND_INLIER_DISTANCE).sum(axis=0)
    best = int(np.argmax(support))
    n, d = normals[best], offsets[best]
    band = GROUND_INLIER_DISTANCE
    for it in range(6):
        dist = np.abs(points @ n + d)
        inliers = dist <= band
        if inliers.sum() < 3:
            break
        n, d = _fit_plane(points[inliers])
        if it >= 2:
            # wall bases inside the band bias the fit: shrink it to the spread of the floor itself
            dist = np.abs(points[inliers] @ n + d)
            band = min(GROUND_INLIER_DISTANCE, 3.0 * 1.4826 * float(np.median(dist)))
    inliers = np.abs(points @ n + d) < GROUND_INLIER_DISTANCE
    if n[2] < math.cos(math.radians(GROUND_MAX_TILT_DEG)) or inliers.mean() < GROUND_MIN_SUPPORT:
        raise GroundAlignmentError(f"ground support {inliers.mean():.1%} below {GROUND_MIN_SUPPORT:.0%}")
    height = points @ n + d
    below = int((height < -GROUND_BELOW_MARGIN).sum())
    if below > GROUND_MAX_BELOW_RATIO * inliers.sum():
        raise GroundAlignmentError(f"{below} points lie below the best horizontal plane ({inliers.sum()} on it)")
    rot = _rotation_between(n, np.array([0.0, 0.0, 1.0]))
    transform = RigidTransform(rot, [0.0, 0.0, d])
    aligned = transform.apply(points)
    covered = _covered_fraction(aligned[:, :2], inliers, height > GROUND_COVER_HEIGHT)
    if covered > GROUND_MAX_COVERED:
        raise GroundAlignmentError(f"{covered:.0%} of the plane cells have structure right above them")
    return transform, TimedPointCloud(aligned, np.zeros(len(aligned)))


def density_image(aligned_points: TimedPointCloud | np.ndarray, resolution: float) -> DensityImage:
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    pts = aligned_points.points if isinstance(aligned_points, TimedPointCloud) else aligned_points
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return DensityImage(resolution, np.zeros(2), np.zeros((1, 1)), 0)
    cells_xy = np.floor(pts[:, :2] / resolution).astype(np.int64)
    lo = cells_xy.min(axis=0)
    idx = cells_xy - lo
    width, height = idx.max(axis=0) + 1
    if width * height > MAX_IMAGE_PIXELS:
        raise ValueError(f"density image of {width}x{height} pixels is too large")
    counts = np.zeros((height, width), dtype=np.int64)
    np.add.at(counts, (idx[:, 1], idx[:, 0]), 1)
    peak = int(counts.max())
    return DensityImage(resolution, lo * resolution, counts / peak, peak)


def extract_features(image: DensityImage | np.ndarray, max_features: int = 1000) -> FeatureSet:
    cells = image.cells if isinstance(image, DensityImage) else image
    return _extract(cells, max_features)


def _rigid_2d(src: np.ndarray, dst: np.ndarray):
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    h = (src - ms).T @ (dst - md)
    angle = math.atan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return rot, md - rot @ ms


def ransac_rigid_2d(src: np.ndarray, dst: np.ndarray, iterations: int, inlier_radius: float,
                    seed: int = 0):
    """2-point RANSAC for ``dst ~ R src + t``; returns ``(R, t, inlier_mask)`` or None."""
    m = len(src)
    if m < 2:
        return None
    rng = np.random.default_rng(seed)
    i = rng.integers(0, m, size=iterations)
    j = rng.integers(0, m - 1, size=iterations)
    j = np.where(j >= i, j + 1, j)
    ds, dd = src[j] - src[i], dst[j] - dst[i]
    consistent = np.abs(np.linalg.norm(ds, axis=1) - np.linalg.norm(dd, axis=1)) < 2 * inlier_radius
    if not consistent.any():
        return None
    i, j, ds, dd = i[consistent], j[consistent], ds[consistent], dd[consistent]
    angle = np.arctan2(dd[:, 1], dd[:, 0]) - np.arctan2(ds[:, 1], ds[:, 0])
    c, s = np.cos(angle), np.sin(angle)
    mid_s = 0.5 * (src[i] + src[j])
    mid_d = 0.5 * (dst[i] + dst[j])
    tx = mid_d[:, 0] - (c * mid_s[:, 0] - s * mid_s[:, 1])
    ty = mid_d[:, 1] - (s * mid_s[:, 0] + c * mid_s[:, 1])
    px = c[:, None] * src[None, :, 0] - s[:, None] * src[None, :, 1] + tx[:, None]
    py = s[:, None] * src[None, :, 0] + c[:, None] * src[None, :, 1] + ty[:, None]
    err2 = (px - dst[None, :, 0]) ** 2 + (py - dst[None, :, 1]) ** 2
    support = (err2 < inlier_radius**2).sum(axis=1)
    best = int(np.argmax(support))
    mask = err2[best] < inlier_radius**2
    rot, t = None, None
    for _ in range(3):
        if mask.sum() < 2:
            break
        rot, t = _rigid_2d(src[mask], dst[mask])
        res = np.linalg.norm(src @ rot.T + t - dst, axis=1)
        new_mask = res < inlier_radius
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if rot is None:
        return None
    return rot, t, mask


def lift_2d(rot: np.ndarray, t: np.ndarray) -> RigidTransform:
    r3 = np.eye(3)
    r3[:2, :2] = rot
    return RigidTransform(r3, [t[0], t[1], 0.0])


def find_candidates(query: MapDescriptor, database, min_matches: int = 10, ratio: float = 0.8,
                    max_hamming: int = 64, ransac_iterations: int = 1000,
                    inlier_pixels: float = 2.0, min_inliers: int = 10) -> list[LoopCandidate]:
    """Match ``query`` against prior map descriptors; strongest candidates first.

    The query map and its immediate predecessor are skipped even if present.
    """
    out = []
    q_metric = query.image.pixel_to_metric(query.features.keypoints)
    for entry in database:
        if entry.map_id in (query.map_id, query.map_id - 1):
            continue
        qi, ti = match_descriptors(query.features.descriptors, entry.features.descriptors, ratio, max_hamming)
        if len(qi) < min_matches:
            continue
        src = q_metric[qi]
        dst = entry.image.pixel_to_metric(entry.features.keypoints[ti])
        fit = ransac_rigid_2d(src, dst, ransac_iterations, inlier_pixels * query.image.resolution,
                              seed=query.map_id * 100003 + entry.map_id)
        if fit is None:
            continue
        rot, t, mask = fit
        inliers = int(mask.sum())
        if inliers < min_inliers:
            continue
        guess = entry.ground_transform.inverse() @ lift_2d(rot, t) @ query.ground_transform
        out.append(LoopCandidate(query.map_id, entry.map_id, guess, inliers))
    out.sort(key=lambda c: (-c.inlier_count, c.target_map_id))
    return out


def overlap_coefficient(source_means: np.ndarray, target_means: np.ndarray, transform: RigidTransform,
                        voxel_size: float) -> float:
    """Shared voxels of the transformed source means and the target means over the smaller set size.

    Source means falling in the same target voxel count once, keeping the
    value in [0, 1].
    """
    n_src, n_tgt = len(source_means), len(target_means)
    if n_src == 0 or n_tgt == 0:
        return 0.0
    src = np.unique(pack_keys(voxel_keys(transform.apply(source_means), voxel_size)))
    tgt = np.unique(pack_keys(voxel_keys(target_means, voxel_size)))
    shared = np.intersect1d(src, tgt, assume_unique=True).size
    return min(1.0, shared / min(n_src, n_tgt))


def point_to_plane_icp(source: np.ndarray, target: np.ndarray, target_normals: np.ndarray,
                       initial: RigidTransform, voxel_size: float, gates=(4.0, 2.0, 1.0),
                       iterations_per_gate: int = 10, min_correspondences: int = 6):
    """Refine ``initial`` so that ``n^T (T mu_src - mu_tgt)`` vanishes; None on divergence."""
    grid = VoxelHashMap(voxel_size, max_points_per_voxel=64)
    grid.insert(target)
    if len(grid) != len(target):
        raise ValueError("target points were dropped by the voxel grid")
    pose = initial
    for gate in gates:
        max_dist = gate * voxel_size
        for _ in range(iterations_per_gate):
            moved = pose.apply(source)
            _, dist, seq = grid.nearest_neighbors(moved, max_dist)
            ok = seq >= 0
            if ok.sum() < min_correspondences:
                return None
            mu, q, n = source[ok], target[seq[ok]], target_normals[seq[ok]]
            r = np.einsum("ni,ni->n", n, moved[ok] - q)
            a = n @ pose.rotation  # normals expressed in the source frame
            jac = np.hstack([np.cross(mu, a), a])
            h = jac.T @ jac
            g = jac.T @ r
            damping = 1e-9 * max(np.trace(h), 1e-12)
            step = -np.linalg.solve(h + damping * np.eye(6), g)
            if not np.all(np.isfinite(step)):
                return None
            pose = pose @ se3_exp(step)
            if np.linalg.norm(step) < 1e-8:
                break
    return pose


def validate(candidate: LoopCandidate, source_stats: VoxelStats, target_stats: VoxelStats,
             gamma_threshold: float = 0.4, voxel_size: float = 0.5) -> ValidatedClosure | None:
    if len(source_stats) == 0 or len(target_stats) == 0:
        return None
    refined = point_to_plane_icp(source_stats.means, target_stats.means, target_stats.normals,
                                 candidate.initial_guess, voxel_size)
    if refined is None:
        log.debug("closure %d->%d rejected: no correspondences", candidate.source_map_id, candidate.target_map_id)
        return None
    gamma = overlap_coefficient(source_stats.means, target_stats.means, refined, voxel_size)
    if gamma < gamma_threshold:
        log.debug("closure %d->%d rejected: overlap %.3f", candidate.source_map_id, candidate.target_map_id, gamma)
        return None
    return ValidatedClosure(candidate.source_map_id, candidate.target_map_id, candidate.initial_guess,
                            candidate.inlier_count, refined, gamma)


def write_density_pgm(image: DensityImage, path: str | Path) -> None:
    """8-bit binary PGM, first row = largest y."""
    pixels = quantize(image.cells)[::-1]
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


class LoopClosureDetector:
    """Keeps the descriptor database and turns each finalized map into closures."""

    def __init__(self, config, voxel_size: float, dump_dir: str | Path | None = None):
        self.config = config
        self.voxel_size = voxel_size
        self.dump_dir = Path(dump_dir) if dump_dir is not None else None
        self.database: list[MapDescriptor] = []
        self.stats: dict[int, VoxelStats] = {}

    def describe(self, local_map: LocalMap) -> MapDescriptor | None:
        try:
            ground, aligned = ground_align(local_map, seed=local_map.id)
        except GroundAlignmentError as exc:
            log.info("map %d skipped for loop closure: %s", local_map.id, exc)
            return None
        try:
            image = density_image(aligned, self.config.density_resolution)
        except ValueError as exc:
            log.warning("map %d skipped for loop closure: %s", local_map.id, exc)
            return None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            write_density_pgm(image, self.dump_dir / f"density_{local_map.id:04d}.pgm")
        return MapDescriptor(local_map.id, ground, image, extract_features(image, self.config.max_features))

    def detect(self, descriptor: MapDescriptor, stats: VoxelStats) -> list[ValidatedClosure]:
        cfg = self.config
        candidates = find_candidates(descriptor, self.database, cfg.min_matches, cfg.ratio_test, cfg.max_hamming,
                                     cfg.ransac_iterations, cfg.ransac_inlier_pixels, cfg.min_inliers)
        closures = []
        for cand in candidates:
            closure = validate(cand, stats, self.stats[cand.target_map_id], cfg.overlap_threshold, self.voxel_size)
            if closure is not None:
                log.info("loop closure %d -> %d (inliers %d, overlap %.2f)", closure.source_map_id,
                         closure.target_map_id, closure.inlier_count, closure.overlap)
                closures.append(closure)
        return closures

    def process(self, local_map: LocalMap) -> list[ValidatedClosure]:
        """Detect closures for a finalized map, then add it to the database."""
        if not local_map.finalized:
            raise ValueError("loop closure needs a finalized local map")
        descriptor = self.describe(local_map)
        if descriptor is None:
            return []
        closures = self.detect(descriptor, local_map.voxel_stats)
        self.database.append(descriptor)
        self.stats[local_map.id] = local_map.voxel_stats
        return closures
