"""Pose-free two-view pose estimation and novel view synthesis on numpy.

The pipeline correlates feature pyramids of two context images, regresses
their relative pose, and renders a target view by sampling along epipolar
lines. A synthetic-scene oracle and the evaluation protocol live alongside.
"""

from .config import Config, load_config
from .errors import PosefreeError
from .evaluation import OverlapSplit, PairRecord, frame_skip_select, overlap_score, summarize
from .geometry import Intrinsics, Pose, compose, geodesic_distance, invert, relative_pose
from .pipeline import PipelineState
from .posehead import PoseEstimate, estimate_pose
from .renderer import render_image

__all__ = [
    "Config", "Intrinsics", "OverlapSplit", "PairRecord", "PipelineState", "Pose",
    "PoseEstimate", "PosefreeError", "compose", "estimate_pose", "frame_skip_select",
    "geodesic_distance", "invert", "load_config", "overlap_score", "relative_pose",
    "render_image", "summarize",
]

__version__ = "0.1.0"
