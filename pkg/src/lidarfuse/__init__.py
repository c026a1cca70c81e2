"""Multi-view (voxel, range, point), multi-modal (LiDAR + camera) segmentation at desk scale.

The network is built on :mod:`lidarfuse.tensor`, a small numpy reverse-mode
autodiff engine. Submodules are imported lazily by users; the most common
names are re-exported here.
"""

from .errors import ConfigError, ContractError, DimensionError, FormatError, LidarFuseError, TrainingError
from .tensor import Tensor, grad_check

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "LidarFuseError",
    "Tensor",
    "TrainingError",
    "grad_check",
]
__version__ = "0.1.0"
