"""Стерео + LiDAR: Input Fusion и CCVNorm / HierCCVNorm на numpy."""
from .config import NetworkConfig, RunConfig, SceneConfig, TrainConfig
from .errors import ConfigError, DataError, DivergenceError, FusionStereoError, ShapeError

__all__ = [
    "NetworkConfig",
    "RunConfig",
    "SceneConfig",
    "TrainConfig",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "FusionStereoError",
    "ShapeError",
]

__version__ = "0.1.0"
