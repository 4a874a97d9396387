import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

from lidarslam.geometry import (
    DomainError,
    RigidTransform,
    TimedPointCloud,
    adjoint,
    se3_exp,
    se3_log,
    skew,
    transform_cloud,
    voxel_downsample,
    voxel_keys,
)

from conftest import random_transform

finite = st.floats(-5.0, 5.0, allow_nan=False)


def _twists(max_angle=3.0):
    def build(v):
        w = np.array(v[:3])
        n = np.linalg.norm(w)
        if n > max_angle:
            w = w * (max_angle / n)
        return np.concatenate([w, v[3:]])

    return st.lists(finite, min_size=6, max_size=6).map(build)


def _hat(twist):
    m = np.zeros((4, 4))
    m[:3, :3] = skew(twist[:3])
    m[:3, 3] = twist[3:]
    return m


def test_exp_zero_is_identity():
    assert se3_exp(np.zeros(6)).allclose(RigidTransform.identity(), atol=0.0)


def test_exp_quarter_turn_about_z():
    t = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(t.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(t.translation, 0.0, atol=0.0)


def test_log_of_identity_and_pure_translation():
    np.testing.assert_array_equal(se3_log(RigidTransform.identity()), np.zeros(6))
    np.testing.assert_allclose(se3_log(RigidTransform.from_translation(1, 2, 3)), [0, 0, 0, 1, 2, 3], atol=1e-15)


def test_log_rejects_half_turn():
    with pytest.raises(DomainError):
        se3_log(se3_exp([0, 0, math.pi, 1, 0, 0]))
    with pytest.raises(DomainError):
        se3_log(se3_exp([math.pi - 1e-7, 0, 0, 0, 0, 0]))


def test_exp_matches_matrix_exponential(rng):
    # independent oracle: scipy's dense matrix exponential of the 4x4 generator
    for _ in range(200):
        w = rng.normal(size=6)
        w[:3] *= rng.uniform(0, 3.0) / np.linalg.norm(w[:3])
        np.testing.assert_allclose(se3_exp(w).matrix(), expm(_hat(w)), atol=1e-12)


def test_log_matches_matrix_logarithm(rng):
    for _ in range(100):
        t = random_transform(rng, max_angle=3.0)
        generator = np.real(logm(t.matrix()))
        expected = np.concatenate([[generator[2, 1], generator[0, 2], generator[1, 0]], generator[:3, 3]])
        np.testing.assert_allclose(se3_log(t), expected, atol=1e-9)


def test_log_exp_round_trip_1000_samples(rng):
    for _ in range(1000):
        w = rng.normal(size=6) * 3
        w[:3] *= rng.uniform(0, math.pi - 1e-3) / np.linalg.norm(w[:3])
        np.testing.assert_allclose(se3_log(se3_exp(w)), w, atol=1e-9)


@given(_twists())
def test_log_inverts_exp(w):
    np.testing.assert_allclose(se3_log(se3_exp(w)), w, atol=1e-9)


@given(_twists(), _twists())
def test_composition_stays_on_manifold(a, b):
    t = se3_exp(a) @ se3_exp(b)
    np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9
    assert (t @ t.inverse()).allclose(RigidTransform.identity(), atol=1e-9)


def test_long_compose_inverse_chain_stays_orthonormal(rng):
    # regression: x <- x @ d and d <- x_prev^-1 @ x, repeated, used to amplify
    # round-off geometrically until the rotation was no longer a rotation
    pose = RigidTransform.identity()
    delta = se3_exp([0.001, -0.002, 0.01, 1.5, 0.02, 0.0])
    for _ in range(5000):
        prev = pose
        pose = pose @ delta @ se3_exp(rng.normal(scale=1e-4, size=6))
        delta = prev.inverse() @ pose
    err = np.abs(pose.rotation.T @ pose.rotation - np.eye(3)).max()
    assert err < 1e-12
    err = np.abs(delta.rotation.T @ delta.rotation - np.eye(3)).max()
    assert err < 1e-12


def test_adjoint_conjugation(rng):
    for _ in range(50):
        t = random_transform(rng)
        x = rng.normal(size=6) * 0.5
        lhs = se3_exp(adjoint(t) @ x)
        rhs = t @ se3_exp(x) @ t.inverse()
        assert lhs.allclose(rhs, atol=1e-9)


def test_transform_cloud_basics():
    cloud = TimedPointCloud(np.zeros((1, 3)), [0.3])
    moved = transform_cloud(RigidTransform.from_translation(1, 0, 0), cloud)
    np.testing.assert_array_equal(moved.points, [[1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(moved.timestamps, [0.3])
    same = transform_cloud(RigidTransform.identity(), cloud)
    np.testing.assert_array_equal(same.points, cloud.points)


def test_transform_cloud_is_associative(rng):
    pts = rng.normal(size=(200, 3)) * 10
    cloud = TimedPointCloud(pts, rng.uniform(size=200))
    for _ in range(50):
        a, b = random_transform(rng), random_transform(rng)
        np.testing.assert_allclose(transform_cloud(a @ b, cloud).points,
                                   transform_cloud(a, transform_cloud(b, cloud)).points, atol=1e-9)


def test_apply_matches_homogeneous_product(rng):
    t = random_transform(rng)
    pts = rng.normal(size=(20, 3))
    homog = np.column_stack([pts, np.ones(20)]) @ t.matrix().T
    np.testing.assert_allclose(t.apply(pts), homog[:, :3], atol=1e-12)


def test_cloud_rejects_bad_timestamps():
    with pytest.raises(ValueError):
        TimedPointCloud(np.zeros((3, 3)), [0.1, 0.2])
    with pytest.raises(ValueError):
        TimedPointCloud(np.zeros((2, 3)), [0.1, 1.5])


def test_voxel_keys_floor_toward_negative_infinity():
    np.testing.assert_array_equal(voxel_keys(np.array([[-0.1, 0.1, -1.0]]), 1.0), [[-1, 0, -1]])


def test_downsample_examples():
    two = TimedPointCloud(np.array([[0.1, 0, 0], [0.2, 0, 0]]))
    out = voxel_downsample(two, 1.0)
    np.testing.assert_array_equal(out.points, [[0.1, 0.0, 0.0]])
    spread = TimedPointCloud(np.array([[0.5, 0.5, 0.5], [2.5, 2.5, 2.5], [-1.5, 4.5, -3.5]]))
    assert len(voxel_downsample(spread, 1.0)) == 3
    with pytest.raises(ValueError):
        voxel_downsample(two, 0.0)


def test_downsample_grid_matches_brute_force_binning():
    g = np.arange(10) * 0.5
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    out = voxel_downsample(TimedPointCloud(pts), 1.0)
    distinct = {tuple(k) for k in np.floor(pts / 1.0).astype(int)}
    assert len(out) == len(distinct)


@given(arrays(np.float64, st.tuples(st.integers(0, 80), st.just(3)), elements=st.floats(-20, 20)),
       st.sampled_from([0.1, 0.5, 1.0, 2.5]))
def test_downsample_properties(pts, voxel):
    cloud = TimedPointCloud(pts)
    once = voxel_downsample(cloud, voxel)
    assert len(once) <= len(cloud)
    keys = voxel_keys(once.points, voxel)
    assert len({tuple(k) for k in keys}) == len(once)
    # each survivor is the first input point of its voxel
    all_keys = [tuple(k) for k in voxel_keys(pts, voxel)]
    for p, k in zip(once.points, keys):
        first = all_keys.index(tuple(k))
        np.testing.assert_array_equal(p, pts[first])
    twice = voxel_downsample(once, voxel)
    np.testing.assert_array_equal(twice.points, once.points)


def test_rotation_matches_scipy_for_random_rotvec(rng):
    for _ in range(20):
        rv = rng.normal(size=3)
        np.testing.assert_allclose(se3_exp(np.r_[rv, 0, 0, 0]).rotation,
                                   Rotation.from_rotvec(rv).as_matrix(), atol=1e-12)
