"""Cooperative localization of heterogeneous robots on a sliding-window factor graph."""

from .se3 import Pose

__all__ = ["Pose"]
__version__ = "0.1.0"
