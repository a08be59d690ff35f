"""Depth-aware salient object detection: depth supervises training, RGB alone drives inference."""

__version__ = "0.1.0"

from .model import DASNet, DASNetConfig, PredictionBundle, load_checkpoint, save_checkpoint  # noqa: E402,F401
