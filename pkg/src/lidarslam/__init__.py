"""LiDAR-only SLAM: ICP odometry, keypose local maps, density-image loop closure and pose graphs."""

from .config import PipelineConfig, load_config
from .geometry import RigidTransform, TimedPointCloud
from .pipeline import SlamPipeline, run

__all__ = ["PipelineConfig", "RigidTransform", "SlamPipeline", "TimedPointCloud", "load_config", "run"]
__version__ = "0.1.0"
