"""Dual-stream RGB + X tracker with adaptive modality interaction, built on a small numpy autograd."""
from .config import TrackerConfig, load_config
from .model import forward, init_params

__version__ = "0.1.0"
__all__ = ["TrackerConfig", "load_config", "forward", "init_params"]
