"""Pipeline configuration.

The on-disk format is one ``section.key = value`` assignment per line; ``#``
starts a comment.  Every key has a default, unknown keys are rejected, and
``dump_config`` writes the full effective configuration in the same format.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class OdometryConfig:
    min_range: float = 1.0
    max_range: float = 100.0
    voxel_size: float = 1.0
    max_points_per_voxel: int = 20
    convergence_tol: float = 1e-4
    max_iterations: int = 500
    initial_threshold: float = 2.0
    min_motion: float = 0.1
    deskew: bool = True


@dataclass
class LocalMappingConfig:
    voxel_size: float = 0.5
    max_points_per_voxel: int = 20
    splitting_distance: float = 100.0
    crop_radius: float = 100.0


@dataclass
class LoopClosureConfig:
    enabled: bool = True
    density_resolution: float = 0.5
    max_features: int = 1000
    ratio_test: float = 0.8
    max_hamming: int = 64
    min_matches: int = 10
    ransac_iterations: int = 1000
    ransac_inlier_pixels: float = 2.0
    min_inliers: int = 10
    asynchronous: bool = False

    # acceptance threshold on the overlap coefficient; deliberately not a field
    OVERLAP_THRESHOLD = 0.4

    @property
    def overlap_threshold(self) -> float:
        return self.OVERLAP_THRESHOLD


@dataclass
class PoseGraphConfig:
    max_iterations: int = 100
    tolerance: float = 1e-10
    initial_damping: float = 1e-6
    loop_edge_weight: float = 1.0


@dataclass
class OccupancyConfig:
    voxel_size: float = 0.05
    max_range: float = 100.0
    hit: float = 0.85
    miss: float = -0.4
    clamp_min: float = -2.0
    clamp_max: float = 3.5
    z_min: float = 0.1
    z_max: float = 0.2
    occupied_threshold: float = 0.65
    free_threshold: float = 0.196


@dataclass
class PipelineConfig:
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    local_mapping: LocalMappingConfig = field(default_factory=LocalMappingConfig)
    loop_closure: LoopClosureConfig = field(default_factory=LoopClosureConfig)
    pose_graph: PoseGraphConfig = field(default_factory=PoseGraphConfig)
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)

    def validate(self) -> None:
        lengths = {
            "odometry.max_range": self.odometry.max_range,
            "odometry.voxel_size": self.odometry.voxel_size,
            "local_mapping.voxel_size": self.local_mapping.voxel_size,
            "local_mapping.splitting_distance": self.local_mapping.splitting_distance,
            "local_mapping.crop_radius": self.local_mapping.crop_radius,
            "loop_closure.density_resolution": self.loop_closure.density_resolution,
            "loop_closure.ransac_inlier_pixels": self.loop_closure.ransac_inlier_pixels,
            "occupancy.voxel_size": self.occupancy.voxel_size,
            "occupancy.max_range": self.occupancy.max_range,
        }
        for key, value in lengths.items():
            if not value > 0:
                raise ConfigError(f"{key} must be > 0, got {value}")
        if not 0 <= self.odometry.min_range < self.odometry.max_range:
            raise ConfigError("odometry.min_range must satisfy 0 <= min_range < max_range")
        if not 0 < self.loop_closure.overlap_threshold <= 1:
            raise ConfigError("loop_closure.overlap_threshold must be in (0, 1]")
        if not self.occupancy.z_min < self.occupancy.z_max:
            raise ConfigError("occupancy.z_min must be < occupancy.z_max")
        if not self.occupancy.clamp_min < 0 < self.occupancy.clamp_max:
            raise ConfigError("occupancy clamp bounds must straddle 0")
        for key in ("odometry.max_points_per_voxel", "odometry.max_iterations",
                    "local_mapping.max_points_per_voxel", "pose_graph.max_iterations"):
            section, name = key.split(".")
            if getattr(getattr(self, section), name) < 1:
                raise ConfigError(f"{key} must be >= 1")

    def items(self):
        for section in dataclasses.fields(self):
            obj = getattr(self, section.name)
            for f in dataclasses.fields(obj):
                yield f"{section.name}.{f.name}", getattr(obj, f.name)


READ_ONLY_KEYS = {"loop_closure.overlap_threshold": LoopClosureConfig.OVERLAP_THRESHOLD}


def _parse_value(raw: str, kind, key: str, lineno: int):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r} for {key}") from None


def parse_config(text: str) -> PipelineConfig:
    config = PipelineConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {key!r} must look like section.key")
        if key in READ_ONLY_KEYS:
            raise ConfigError(f"line {lineno}: {key} is fixed at {READ_ONLY_KEYS[key]} and cannot be set")
        section, name = key.split(".")
        obj = getattr(config, section, None)
        if obj is None or not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        kind = {f.name: f.type for f in dataclasses.fields(obj)}[name]
        setattr(obj, name, _parse_value(raw, kind, key, lineno))
    config.validate()
    return config


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        config = PipelineConfig()
        config.validate()
        return config
    return parse_config(Path(path).read_text())


def format_config(config: PipelineConfig) -> str:
    lines = []
    current = None
    for key, value in config.items():
        section = key.split(".")[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# {section}")
            current = section
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
        if key == "loop_closure.asynchronous":
            for fixed, val in READ_ONLY_KEYS.items():
                lines.append(f"# {fixed} = {val}  (fixed)")
    return "\n".join(lines) + "\n"


def dump_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(config))
