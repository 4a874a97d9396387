import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarslam.config import (
    ConfigError,
    PipelineConfig,
    dump_config,
    format_config,
    load_config,
    parse_config,
)
from lidarslam.geometry import TimedPointCloud
from lidarslam.io import (
    ScanLoadError,
    ScanSource,
    normalize_times,
    read_kitti_bin,
    read_ply,
    read_scan,
    read_synth_scan,
    write_kitti_bin,
    write_ply,
    write_synth_scan,
)


# --- scans ---------------------------------------------------------------------------------------


def test_handwritten_ascii_ply(tmp_path):
    text = """ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
end_header
1.5 -2 3
0 0.25 -7
10 20 30
"""
    (tmp_path / "a.ply").write_text(text)
    cloud = read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(cloud.points, [[1.5, -2, 3], [0, 0.25, -7], [10, 20, 30]])
    np.testing.assert_array_equal(cloud.timestamps, 0.5)


def test_ply_time_field_is_normalized(tmp_path):
    text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\n" \
           "property double z\nproperty double time\nend_header\n0 0 0 100.0\n1 0 0 100.05\n2 0 0 100.1\n"
    (tmp_path / "t.ply").write_text(text)
    np.testing.assert_allclose(read_ply(tmp_path / "t.ply").timestamps, [0, 0.5, 1], atol=1e-9)


def test_four_float32_quadruples(tmp_path):
    quads = np.arange(16, dtype="<f4").reshape(4, 4)
    (tmp_path / "000.bin").write_bytes(quads.tobytes())
    cloud = read_kitti_bin(tmp_path / "000.bin")
    assert len(cloud) == 4
    np.testing.assert_array_equal(cloud.points, quads[:, :3])


def test_round_trip_each_format(tmp_path, rng):
    pts = rng.normal(scale=30, size=(500, 3))
    times = np.sort(rng.uniform(size=500))
    cloud = TimedPointCloud(pts, times)
    for binary in (True, False):
        write_ply(tmp_path / "c.ply", cloud, binary=binary)
        back = read_ply(tmp_path / "c.ply")
        np.testing.assert_array_equal(back.points, pts)
        np.testing.assert_array_equal(back.timestamps, times)
    write_kitti_bin(tmp_path / "c.bin", cloud)
    np.testing.assert_array_equal(read_kitti_bin(tmp_path / "c.bin").points, pts.astype(np.float32))
    write_synth_scan(tmp_path / "c.npz", cloud, 12.5)
    back, stamp = read_synth_scan(tmp_path / "c.npz")
    np.testing.assert_array_equal(back.points, pts)
    np.testing.assert_array_equal(back.timestamps, times)
    assert stamp == 12.5


def test_malformed_files_name_the_path(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\0" * 10)
    with pytest.raises(ScanLoadError, match="bad.bin"):
        read_kitti_bin(tmp_path / "bad.bin")
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n2\n")
    with pytest.raises(ScanLoadError, match="bad.ply"):
        read_ply(tmp_path / "bad.ply")
    (tmp_path / "short.ply").write_text(
        "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n")
    with pytest.raises(ScanLoadError, match="short.ply"):
        read_ply(tmp_path / "short.ply")
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(ScanLoadError, match="bad.npz"):
        read_synth_scan(tmp_path / "bad.npz")


def test_scan_source_order_and_range(tmp_path, rng):
    for name in ("0002", "0000", "0001"):
        write_kitti_bin(tmp_path / f"{name}.bin", TimedPointCloud(rng.normal(size=(int(name) + 1, 3))))
    src = ScanSource.open(tmp_path)
    assert src.format == "kitti" and src.ids == ["0000", "0001", "0002"]
    assert [len(read_scan(src, i)) for i in range(3)] == [1, 2, 3]
    assert [stamp for _, stamp in src] == [0.0, 0.1, pytest.approx(0.2)]
    with pytest.raises(IndexError):
        read_scan(src, 3)
    with pytest.raises(ScanLoadError):
        ScanSource.open(tmp_path / "nope")


def test_normalize_times_examples():
    np.testing.assert_array_equal(normalize_times(None, 3), 0.5)
    np.testing.assert_array_equal(normalize_times(np.array([0.0, 0.3, 1.0]), 3), [0.0, 0.3, 1.0])
    np.testing.assert_array_equal(normalize_times(np.array([5.0, 5.0]), 2), 0.5)
    with pytest.raises(ValueError):
        normalize_times(np.array([0.0, np.nan]), 2)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_normalized_times_lie_in_unit_interval(times):
    out = normalize_times(np.array(times), len(times))
    assert ((out >= 0) & (out <= 1)).all()


# --- config --------------------------------------------------------------------------------------


def test_empty_config_is_default():
    assert parse_config("") == PipelineConfig()
    assert parse_config("# only a comment\n\n") == PipelineConfig()
    assert load_config(None) == PipelineConfig()


def test_single_key_changes_only_that_key():
    cfg = parse_config("odometry.max_range = 50\n")
    diff = {k for (k, a), (_, b) in zip(cfg.items(), PipelineConfig().items()) if a != b}
    assert diff == {"odometry.max_range"}
    assert cfg.odometry.max_range == 50.0


def test_dumped_config_reloads_identically(tmp_path):
    cfg = parse_config("local_mapping.splitting_distance = 80\nloop_closure.enabled = false\n"
                       "occupancy.z_max = 0.3\npose_graph.max_iterations = 7\n")
    dump_config(cfg, tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    assert parse_config(format_config(PipelineConfig())) == PipelineConfig()


@pytest.mark.parametrize("text, match", [
    ("odometry.max_range 50", "line 1"),
    ("\n\nodometry.nope = 1", "line 3.*unknown"),
    ("bogus.max_range = 1", "unknown"),
    ("odometry.max_range = abc", "line 1.*max_range"),
    ("odometry.max_range = 1\nodometry.max_range = 2", "line 2.*duplicate"),
    ("odometry.max_range = -3", "odometry.max_range"),
    ("occupancy.z_min = 0.5", "z_min"),
    ("loop_closure.overlap_threshold = 0.3", "fixed"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_overlap_threshold_is_not_a_field():
    cfg = PipelineConfig()
    assert cfg.loop_closure.overlap_threshold == 0.4
    assert "overlap_threshold" not in {f.name for f in dataclasses.fields(cfg.loop_closure)}
    assert "loop_closure.overlap_threshold = 0.4" in format_config(cfg)


def test_documented_defaults():
    cfg = PipelineConfig()
    assert cfg.odometry.max_range == 100.0
    assert cfg.occupancy.voxel_size == 0.05
    assert (cfg.occupancy.z_min, cfg.occupancy.z_max) == (0.1, 0.2)
