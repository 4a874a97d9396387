"""Oriented FAST corners with steered 256-bit binary descriptors (single scale).

Keypoints are ``(x, y)`` = ``(column, row)`` in image pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PATCH_RADIUS = 15
BORDER = 23  # rotated sampling points stay within PATCH_RADIUS * sqrt(2)
DESCRIPTOR_BITS = 256
_PATTERN_SEED = 0x0B1E

_CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _sampling_pattern() -> np.ndarray:
    rng = np.random.default_rng(_PATTERN_SEED)
    pts = np.round(rng.normal(0.0, 2.0 * PATCH_RADIUS / 5.0, size=(DESCRIPTOR_BITS, 4)))
    return np.clip(pts, -PATCH_RADIUS, PATCH_RADIUS)


PATTERN = _sampling_pattern()

_yy, _xx = np.mgrid[-PATCH_RADIUS:PATCH_RADIUS + 1, -PATCH_RADIUS:PATCH_RADIUS + 1]
_disk = _xx**2 + _yy**2 <= PATCH_RADIUS**2
_DISK_X = _xx[_disk]
_DISK_Y = _yy[_disk]


@dataclass(frozen=True)
class BinaryFeature:
    x: float
    y: float
    angle: float
    descriptor: bytes
    response: float = 0.0

    def __post_init__(self):
        if len(self.descriptor) * 8 != DESCRIPTOR_BITS:
            raise ValueError("descriptor must be exactly 256 bits")


@dataclass
class FeatureSet:
    keypoints: np.ndarray  # (K, 2) x, y
    angles: np.ndarray  # (K,) radians
    descriptors: np.ndarray  # (K, 32) uint8
    responses: np.ndarray  # (K,)

    def __len__(self) -> int:
        return len(self.keypoints)

    def __getitem__(self, i) -> BinaryFeature:
        return BinaryFeature(float(self.keypoints[i, 0]), float(self.keypoints[i, 1]),
                             float(self.angles[i]), self.descriptors[i].tobytes(),
                             float(self.responses[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls) -> FeatureSet:
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, DESCRIPTOR_BITS // 8), np.uint8), np.zeros(0))


def fast_corners(image: np.ndarray, threshold: float, arc: int = 9) -> np.ndarray:
    """Boolean corner mask: ``arc`` contiguous circle pixels all brighter or all darker."""
    img = image.astype(np.float32)
    h, w = img.shape
    pad = np.pad(img, 3, mode="edge")
    ring = np.stack([pad[3 + dy:3 + dy + h, 3 + dx:3 + dx + w] for dx, dy in _CIRCLE])
    brighter = ring > img + threshold
    darker = ring < img - threshold
    out = np.zeros((h, w), dtype=bool)
    for mask in (brighter, darker):
        doubled = np.concatenate([mask, mask[: arc - 1]])
        for start in range(16):
            out |= np.logical_and.reduce(doubled[start:start + arc])
    return out


def harris_response(image: np.ndarray, block: int = 7, k: float = 0.04) -> np.ndarray:
    img = image.astype(float)
    gx = ndimage.sobel(img, axis=1)
    gy = ndimage.sobel(img, axis=0)
    sxx = ndimage.uniform_filter(gx * gx, block)
    syy = ndimage.uniform_filter(gy * gy, block)
    sxy = ndimage.uniform_filter(gx * gy, block)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def orientations(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Intensity-centroid angle over a disk of radius PATCH_RADIUS."""
    vals = image[ys[:, None] + _DISK_Y[None, :], xs[:, None] + _DISK_X[None, :]].astype(float)
    m10 = vals @ _DISK_X
    m01 = vals @ _DISK_Y
    return np.arctan2(m01, m10)


def describe(smoothed: np.ndarray, xs: np.ndarray, ys: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    px = lambda x, y: np.rint(c * x - s * y).astype(int) + xs[:, None]  # noqa: E731
    py = lambda x, y: np.rint(s * x + c * y).astype(int) + ys[:, None]  # noqa: E731
    a = smoothed[py(PATTERN[:, 0], PATTERN[:, 1]), px(PATTERN[:, 0], PATTERN[:, 1])]
    b = smoothed[py(PATTERN[:, 2], PATTERN[:, 3]), px(PATTERN[:, 2], PATTERN[:, 3])]
    return np.packbits(a < b, axis=1)


def quantize(cells: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(cells, 0.0, 1.0) * 255.0).astype(np.uint8)


def extract_features(image: np.ndarray, max_features: int = 1000, fast_threshold: float = 20.0) -> FeatureSet:
    """Detect and describe up to ``max_features`` corners, strongest Harris response first.

    ``image`` is either an 8-bit image or a float image in [0, 1] (quantized).
    """
    img8 = image if image.dtype == np.uint8 else quantize(image)
    if img8.size == 0 or max_features <= 0:
        return FeatureSet.empty()
    padded = np.pad(img8, BORDER, mode="edge").astype(float)
    corners = fast_corners(padded, fast_threshold)
    h, w = img8.shape
    valid = np.zeros_like(corners)
    valid[BORDER:BORDER + h, BORDER:BORDER + w] = True
    corners &= valid
    if not corners.any():
        return FeatureSet.empty()
    score = harris_response(padded)
    masked = np.where(corners, score, -np.inf)
    peaks = corners & (masked >= ndimage.maximum_filter(masked, size=3, mode="constant", cval=-np.inf))
    ys, xs = np.nonzero(peaks)
    resp = score[ys, xs]
    order = np.lexsort((xs, ys, -resp))[:max_features]
    ys, xs, resp = ys[order], xs[order], resp[order]
    angles = orientations(padded, xs, ys)
    smoothed = ndimage.uniform_filter(padded, 5, mode="constant")
    desc = describe(smoothed, xs, ys, angles)
    kps = np.column_stack([xs - BORDER, ys - BORDER]).astype(float)
    return FeatureSet(kps, angles, desc, resp)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between two (N, 32) uint8 descriptor arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int32)
    out = np.empty((len(a), len(b)), dtype=np.int32)
    chunk = max(1, 4_000_000 // (len(b) * a.shape[1]))
    for start in range(0, len(a), chunk):
        x = np.bitwise_xor(a[start:start + chunk, None, :], b[None, :, :])
        out[start:start + chunk] = _POPCOUNT[x].sum(axis=2, dtype=np.int32)
    return out


def match_descriptors(query: np.ndarray, train: np.ndarray, ratio: float = 0.8, max_distance: int = 64):
    """Mutual nearest-neighbour matches passing the ratio test; returns (query_idx, train_idx)."""
    if len(query) == 0 or len(train) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    d = hamming_matrix(query, train)
    best = np.argmin(d, axis=1)
    best_d = d[np.arange(len(query)), best]
    back = np.argmin(d, axis=0)
    keep = (back[best] == np.arange(len(query))) & (best_d <= max_distance)
    if d.shape[1] > 1:
        part = np.partition(d, 1, axis=1)
        second = part[:, 1]
        keep &= best_d < ratio * second  # exact ties are ambiguous
    qi = np.flatnonzero(keep)
    return qi, best[qi]


def rotation_of_keypoint(kp, shape, quarter_turns: int):
    """Where pixel ``kp`` lands after ``np.rot90(image, quarter_turns)``."""
    h, w = shape
    x, y = kp
    for _ in range(quarter_turns % 4):
        x, y = y, w - 1 - x
        h, w = w, h
    return x, y


def angle_difference(a: float, b: float) -> float:
    return abs((a - b + math.pi) % (2.0 * math.pi) - math.pi)
