import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarslam.config import OdometryConfig
from lidarslam.geometry import RigidTransform, TimedPointCloud, se3_exp, se3_log
from lidarslam.odometry import (
    AdaptiveThreshold,
    OdometryState,
    RegistrationError,
    deskew,
    normal_equations,
    predict,
    preprocess,
    process_scan,
    register_scan,
)
from lidarslam.synthetic import WorldSpec, generate_synthetic_world
from lidarslam.voxel_map import VoxelHashMap

from conftest import FIXTURE_SEED, random_transform, structured_cloud


def _map_of(points, voxel=1.0, cap=1000):
    m = VoxelHashMap(voxel, cap)
    m.insert(points)
    return m


def _perturbation(rng, shift=0.3, angle_deg=3.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return se3_exp(np.r_[axis * math.radians(angle_deg), np.zeros(3)]) @ RigidTransform.from_translation(
        *(direction * shift))


# --- preprocessing -------------------------------------------------------------------------------


def test_deskew_is_noop_without_motion(rng):
    cloud = TimedPointCloud(rng.normal(size=(100, 3)) * 10, rng.uniform(size=100))
    out = deskew(cloud, RigidTransform.identity())
    np.testing.assert_array_equal(out.points, cloud.points)


def test_range_filter_keeps_only_inliers():
    scan = TimedPointCloud(np.array([[0.5, 0, 0], [50.0, 0, 0], [200.0, 0, 0]]), [0.5, 0.5, 0.5])
    reg, frame = preprocess(scan, 1.0, 100.0, 1.0, RigidTransform.identity())
    np.testing.assert_array_equal(frame.points, [[50.0, 0, 0]])
    np.testing.assert_array_equal(reg.points, [[50.0, 0, 0]])


def test_preprocess_validates_inputs():
    scan = TimedPointCloud(np.ones((3, 3)))
    with pytest.raises(ValueError):
        preprocess(scan, 5.0, 1.0, 1.0, RigidTransform.identity())


def test_double_downsampling_spacing(rng):
    pts = rng.uniform(-20, 20, (20000, 3))
    reg, frame = preprocess(TimedPointCloud(pts), 0.0, 100.0, 1.0, RigidTransform.identity(), False)
    for cloud, voxel in ((frame, 0.5), (reg, 1.5)):
        keys = np.floor(cloud.points / voxel).astype(int)
        assert len({tuple(k) for k in keys}) == len(cloud)
    assert len(reg) < len(frame)


def test_deskewed_wall_is_planar():
    # forward simulation: the sensor moves with a constant twist during the sweep
    # and samples the plane x = 12 (world frame of the mid-sweep pose)
    xi = np.array([0.02, -0.01, 0.15, 1.6, 0.3, 0.05])  # motion over one sweep
    n_cols, elevations = 400, np.radians(np.linspace(-15, 15, 9))
    taus = (np.arange(n_cols) + 0.5) / n_cols
    azimuths = np.linspace(-0.6, 0.6, n_cols)
    pts, times = [], []
    normal, offset = np.array([1.0, 0.0, 0.0]), 12.0
    for tau, az in zip(taus, azimuths):
        pose = se3_exp((tau - 0.5) * xi)  # sensor pose at capture time, mid-sweep frame
        for el in elevations:
            d = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
            d_world = pose.rotation @ d
            r = (offset - normal @ pose.translation) / (normal @ d_world)
            pts.append(r * d)
            times.append(tau)
    scan = TimedPointCloud(np.array(pts), np.array(times))
    raw_dev = np.abs(scan.points[:, 0] - offset).max()
    out = deskew(scan, se3_exp(xi))
    assert np.abs(out.points @ normal - offset).max() < 1e-6
    assert raw_dev > 0.1  # the test is not vacuous


# --- prediction and threshold --------------------------------------------------------------------


def test_predict_examples(rng):
    state = OdometryState.fresh(OdometryConfig())
    assert predict(state).allclose(RigidTransform.identity(), atol=0.0)
    state.last_pose = RigidTransform.from_translation(1, 0, 0)
    state.last_delta = RigidTransform.from_translation(1, 0, 0)
    np.testing.assert_array_equal(predict(state).translation, [2.0, 0, 0])
    for _ in range(20):
        a, b = random_transform(rng), random_transform(rng)
        state.last_pose, state.last_delta = a, b
        np.testing.assert_allclose(predict(state).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_adaptive_threshold():
    th = AdaptiveThreshold(initial_threshold=2.0, min_motion=0.1, max_range=100.0, floor=1.0)
    assert th.max_correspondence_distance == 6.0
    # small motion leaves the statistic untouched
    th.update(RigidTransform.from_translation(0.5, 0, 0), RigidTransform.from_translation(0.05, 0, 0))
    assert th.num_samples == 0
    dev = RigidTransform(se3_exp([0, 0, 0.002, 0, 0, 0]).rotation, np.array([0.1, 0.0, 0.0]))
    th.update(dev, RigidTransform.from_translation(1, 0, 0))
    expected = 0.1 + 2 * 100.0 * math.sin(0.001)
    assert th.rms == pytest.approx(expected, rel=1e-9)
    th2 = AdaptiveThreshold(2.0, 0.1, 100.0, floor=1.0)
    th2.update(RigidTransform.identity(), RigidTransform.from_translation(1, 0, 0))
    assert th2.max_correspondence_distance == 1.0


# --- registration --------------------------------------------------------------------------------


def test_self_registration_is_identity(rng):
    pts = structured_cloud(rng)
    res = register_scan(pts, _map_of(pts), RigidTransform.identity(), 1.0)
    assert res.iterations == 1
    assert res.pose.allclose(RigidTransform.identity(), atol=1e-9)


def test_recovers_known_perturbation_in_random_cube(rng):
    for _ in range(10):
        pts = rng.uniform(-10, 10, (1000, 3))
        applied = _perturbation(rng)
        source = applied.apply(pts)
        res = register_scan(source, _map_of(pts), RigidTransform.identity(), 1.0, 500, 1e-10)
        err = res.pose @ applied
        assert np.linalg.norm(err.translation) < 1e-6
        assert err.angle() < 1e-6


def _residual_jacobian_fd(source, targets, pose, h=1e-6):
    def residuals(dw):
        return ((pose @ se3_exp(dw)).apply(source) - targets).ravel()

    cols = []
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        cols.append((residuals(e) - residuals(-e)) / (2 * h))
    return np.column_stack(cols), residuals(np.zeros(6))


def test_normal_equations_match_finite_differences(rng):
    for _ in range(50):
        source = rng.normal(size=(40, 3)) * 5
        targets = source + rng.normal(size=(40, 3)) * 0.3
        pose = random_transform(rng, max_angle=0.5, max_shift=1.0)
        h, g, chi = normal_equations(source, targets, pose)
        jac, r = _residual_jacobian_fd(source, targets, pose)
        assert chi == pytest.approx(float(r @ r), rel=1e-12)
        np.testing.assert_allclose(h, jac.T @ jac, rtol=1e-5, atol=1e-5 * np.abs(h).max())
        np.testing.assert_allclose(g, jac.T @ r, rtol=1e-5, atol=1e-5 * np.abs(g).max())


def test_gradient_matches_central_differences_of_chi(rng):
    source = rng.normal(size=(60, 3)) * 4
    targets = source + rng.normal(size=(60, 3)) * 0.2
    pose = random_transform(rng, max_angle=0.3, max_shift=0.5)
    _, g, _ = normal_equations(source, targets, pose)

    def chi(dw):
        d = (pose @ se3_exp(dw)).apply(source) - targets
        return float((d * d).sum())

    eps = 1e-6
    fd = np.array([(chi(eps * e) - chi(-eps * e)) / (2 * eps) for e in np.eye(6)])
    np.testing.assert_allclose(2 * g, fd, rtol=1e-5)


@given(st.integers(0, 2**32 - 1))
def test_gauss_newton_step_never_increases_cost(seed):
    rng = np.random.default_rng(seed)
    pts = structured_cloud(rng, 500)
    source = _perturbation(rng, 0.5, 4.0).apply(pts) + rng.normal(scale=0.02, size=pts.shape)
    res = register_scan(source, _map_of(pts), RigidTransform.identity(), 2.0, 30, 1e-8, record_costs=True)
    for before, after in res.costs:
        assert after <= before * (1 + 1e-12) + 1e-12


def test_left_composition_equivariance(rng):
    pts = structured_cloud(rng)
    source = _perturbation(rng).apply(pts) + rng.normal(scale=0.01, size=pts.shape)
    guess = se3_exp([0.01, 0, 0, 0.05, 0, 0])
    base = register_scan(source, _map_of(pts), guess, 1.5, 500, 1e-10).pose
    for _ in range(3):
        t0 = random_transform(rng, max_shift=50.0)
        moved = register_scan(source, _map_of(t0.apply(pts)), t0 @ guess, 1.5, 500, 1e-10).pose
        assert moved.allclose(t0 @ base, atol=1e-6)


def test_registration_errors(rng):
    pts = structured_cloud(rng)
    with pytest.raises(RegistrationError):
        register_scan(pts + 1000.0, _map_of(pts), RigidTransform.identity(), 1.0)
    with pytest.raises(ValueError):
        register_scan(np.zeros((0, 3)), _map_of(pts), RigidTransform.identity(), 1.0)
    with pytest.raises(ValueError):
        register_scan(pts, VoxelHashMap(1.0), RigidTransform.identity(), 1.0)


# --- scan processing -----------------------------------------------------------------------------


def test_first_scan_and_repeated_scan(rng):
    cfg = OdometryConfig()
    state = OdometryState.fresh(cfg)
    scan = TimedPointCloud(structured_cloud(rng, 5000), np.full(5000, 0.5))
    pose, frame = process_scan(state, scan, cfg)
    assert pose.allclose(RigidTransform.identity(), atol=0.0)
    assert len(state.local_odom_map) == len(frame)
    pose2, _ = process_scan(state, scan, cfg)
    assert pose2.allclose(RigidTransform.identity(), atol=1e-6)
    assert se3_log(state.last_delta) == pytest.approx(np.zeros(6), abs=1e-9)


def test_reset_restores_identity(rng):
    cfg = OdometryConfig()
    state = OdometryState.fresh(cfg)
    state.last_pose = random_transform(rng)
    state.last_delta = random_transform(rng)
    state.reset(cfg)
    assert state.last_pose.allclose(RigidTransform.identity(), atol=0.0)
    assert state.last_delta.allclose(RigidTransform.identity(), atol=0.0)


def test_failed_registration_falls_back_to_prediction(rng):
    cfg = OdometryConfig()
    state = OdometryState.fresh(cfg)
    process_scan(state, TimedPointCloud(structured_cloud(rng, 3000)), cfg)
    state.last_delta = RigidTransform.from_translation(0.5, 0, 0)
    far = TimedPointCloud(structured_cloud(rng, 3000) + np.array([0.0, 0.0, 60.0]))
    pose, _ = process_scan(state, far, cfg)
    assert state.last_error is not None
    np.testing.assert_allclose(pose.translation, [0.5, 0, 0])


def test_straight_line_drift_below_one_percent():
    data = generate_synthetic_world(FIXTURE_SEED, WorldSpec(sensor="beam64", motion="car", trajectory="straight",
                                                            num_scans=100))
    cfg = OdometryConfig()
    state = OdometryState.fresh(cfg)
    poses = [process_scan(state, scan, cfg)[0] for scan in data.scans]
    gt = data.ground_truth.poses
    rel_gt = gt[0].inverse() @ gt[-1]
    err = np.linalg.norm((poses[-1].translation - rel_gt.translation))
    assert err < 0.01 * np.linalg.norm(rel_gt.translation)
