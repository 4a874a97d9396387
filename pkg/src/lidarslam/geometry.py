"""SE(3) algebra and point-cloud containers.

Twists are 6-vectors ordered (rotation, translation). The exponential map is
the closed form on SE(3), so the translational part of a twist is *not* the
translation of the resulting transform unless the rotation is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
LOG_DOMAIN_MARGIN = 1e-6


class DomainError(ValueError):
    """Raised when se3_log is called on a rotation too close to pi."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def _exp_coefficients(theta: np.ndarray):
    """Coefficients a, b, c of R = I + a W + b W^2 and V = I + b W + c W^2."""
    theta = np.asarray(theta, dtype=float)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = t * t
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return a, b, c


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(float(omega @ omega))
    w = skew(omega)
    a, b, _ = _exp_coefficients(theta)
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    s = vee(rotation)
    sin_theta = float(np.linalg.norm(s))
    cos_theta = 0.5 * (float(np.trace(rotation)) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta**2 / 6.0)
    if math.pi - theta < 1e-3:
        # sin(theta) is tiny here; recover the axis from the symmetric part
        sym = 0.5 * (rotation + rotation.T) - cos_theta * np.eye(3)
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / math.sqrt(max(sym[k, k], 1e-300))
        if axis @ s < 0.0:
            axis = -axis
        return axis * theta
    return s * (theta / sin_theta)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    _, b, c = _exp_coefficients(theta)
    return np.eye(3) + b * w + c * (w @ w)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < 1e-4:
        d = 1.0 / 12.0 + theta**2 / 720.0
    else:
        d = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * w + d * (w @ w)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> RigidTransform:
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> RigidTransform:
        return cls(np.eye(3), np.array([x, y, z], dtype=float))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        rot = self.rotation @ other.rotation
        # one orthonormalization step; without it round-off in long chains of
        # compose/inverse grows geometrically (inverse assumes R^T = R^-1)
        rot = rot @ (1.5 * np.eye(3) - 0.5 * (rot.T @ rot))
        return RigidTransform(rot, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array (or a single 3-vector) through the transform."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def angle(self) -> float:
        c = 0.5 * (float(np.trace(self.rotation)) - 1.0)
        return math.acos(min(1.0, max(-1.0, c)))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def se3_exp(twist: np.ndarray) -> RigidTransform:
    twist = np.asarray(twist, dtype=float)
    omega, v = twist[:3], twist[3:]
    theta = math.sqrt(float(omega @ omega))
    w = skew(omega)
    w2 = w @ w
    a, b, c = _exp_coefficients(theta)
    rotation = np.eye(3) + a * w + b * w2
    left_jacobian = np.eye(3) + b * w + c * w2
    return RigidTransform(rotation, left_jacobian @ v)


def se3_exp_batch(twists: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised exponential of an (N, 6) twist array; returns (N,3,3), (N,3)."""
    twists = np.asarray(twists, dtype=float)
    omega, v = twists[:, :3], twists[:, 3:]
    theta = np.linalg.norm(omega, axis=1)
    a, b, c = _exp_coefficients(theta)
    w = skew_batch(omega)
    w2 = w @ w
    eye = np.eye(3)[None]
    rotations = eye + a[:, None, None] * w + b[:, None, None] * w2
    jac = eye + b[:, None, None] * w + c[:, None, None] * w2
    return rotations, np.einsum("nij,nj->ni", jac, v)


def se3_log(t: RigidTransform) -> np.ndarray:
    c = 0.5 * (float(np.trace(t.rotation)) - 1.0)
    sin_theta = float(np.linalg.norm(vee(t.rotation)))
    if math.atan2(sin_theta, c) >= math.pi - LOG_DOMAIN_MARGIN:
        raise DomainError("rotation angle too close to pi for a unique logarithm")
    omega = so3_log(t.rotation)
    return np.concatenate([omega, so3_left_jacobian_inv(omega) @ t.translation])


def _q_matrix(omega: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    r = skew(rho)
    wr = w @ r
    rw = r @ w
    wrw = wr @ w
    if theta < 1e-3:
        c1 = 1.0 / 6.0 - theta**2 / 120.0
        c2 = 1.0 / 24.0 - theta**2 / 720.0
        c3 = 1.0 / 120.0 - theta**2 / 2520.0
    else:
        s, co = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = -(1.0 - theta**2 / 2.0 - co) / theta**4
        c3 = -0.5 * ((1.0 - theta**2 / 2.0 - co) / theta**4 - 3.0 * (theta - s - theta**3 / 6.0) / theta**5)
    return 0.5 * r + c1 * (wr + rw + wrw) + c2 * (w @ wr + rw @ w - 3.0 * wrw) + c3 * (wrw @ w + w @ wrw)


def se3_left_jacobian(twist: np.ndarray) -> np.ndarray:
    twist = np.asarray(twist, dtype=float)
    omega, rho = twist[:3], twist[3:]
    j = so3_left_jacobian(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[3:, :3] = _q_matrix(omega, rho)
    return out


def se3_left_jacobian_inv(twist: np.ndarray) -> np.ndarray:
    twist = np.asarray(twist, dtype=float)
    omega, rho = twist[:3], twist[3:]
    jinv = so3_left_jacobian_inv(omega)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[3:, :3] = -jinv @ _q_matrix(omega, rho) @ jinv
    return out


def se3_right_jacobian_inv(twist: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(twist, dtype=float))


def adjoint(t: RigidTransform) -> np.ndarray:
    """Adjoint for (rotation, translation) twist ordering: exp(Ad x) = T exp(x) T^-1."""
    out = np.zeros((6, 6))
    out[:3, :3] = t.rotation
    out[3:, 3:] = t.rotation
    out[3:, :3] = skew(t.translation) @ t.rotation
    return out


def interpolate(t: RigidTransform, fraction: float) -> RigidTransform:
    return se3_exp(fraction * se3_log(t))


@dataclass
class TimedPointCloud:
    points: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
            if len(self.timestamps) != len(self.points):
                raise ValueError(
                    f"timestamps length {len(self.timestamps)} != point count {len(self.points)}"
                )
            if len(self.timestamps) and (self.timestamps.min() < 0.0 or self.timestamps.max() > 1.0):
                raise ValueError("timestamps must be normalised to [0, 1]")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_index) -> TimedPointCloud:
        ts = None if self.timestamps is None else self.timestamps[mask_or_index]
        return TimedPointCloud(self.points[mask_or_index], ts)


def transform_cloud(t: RigidTransform, cloud: TimedPointCloud) -> TimedPointCloud:
    ts = None if cloud.timestamps is None else cloud.timestamps.copy()
    return TimedPointCloud(t.apply(cloud.points), ts)


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack integer voxel coordinates into one int64 per row (21 bits per axis)."""
    offset = np.int64(1 << 20)
    k = keys.astype(np.int64) + offset
    return (k[:, 0] << np.int64(42)) | (k[:, 1] << np.int64(21)) | k[:, 2]


def voxel_downsample(cloud: TimedPointCloud, voxel_size: float) -> TimedPointCloud:
    """Keep the first point that falls into each voxel, preserving input order."""
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud.select(slice(None))
    codes = pack_keys(voxel_keys(cloud.points, voxel_size))
    _, first = np.unique(codes, return_index=True)
    return cloud.select(np.sort(first))
