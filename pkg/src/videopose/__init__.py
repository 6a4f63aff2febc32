"""Keyframe bundle adjustment of camera poses, intrinsics and depth from video."""

from .errors import VideoPoseError
from .geometry import CubeRig, Intrinsics, Pose

__all__ = ["CubeRig", "Intrinsics", "Pose", "VideoPoseError"]
__version__ = "0.1.0"
