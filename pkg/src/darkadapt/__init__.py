"""Darkness-adaptive audio-visual activity recognition at desk scale."""
from .illuminance import DARK_THRESHOLD, clip_illuminance, frame_illuminance, partition

__version__ = "0.1.0"

__all__ = ["DARK_THRESHOLD", "clip_illuminance", "frame_illuminance", "partition", "__version__"]
