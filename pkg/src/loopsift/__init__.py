"""Loop closure sifting for dense RGB-D mapping.

Candidate loop closures are ranked by optimizing the pose graph with each
loop alone and scoring how well the re-fused dense model explains the raw
depth frames; a greedy pass then accepts only the loops that keep
improving that score.  No acceptance threshold is exposed: a loop is kept
exactly when the map gets better.
"""

from .consistency import ConsistencyScore, DepthConsistencyScorer, render_depth, score_map
from .geometry import Pose, compose, exp, inverse, log, transform_point
from .posegraph import Edge, PoseGraph, Trajectory, graph_from_odometry, optimize
from .sifting import LoopCandidate, SiftResult, sift
from .surfels import (
    CameraModel,
    DepthFrame,
    Fragment,
    SurfelMap,
    assemble_model,
    build_fragments,
    fuse_frame,
)

__all__ = [
    "Pose",
    "compose",
    "inverse",
    "exp",
    "log",
    "transform_point",
    "Edge",
    "PoseGraph",
    "Trajectory",
    "optimize",
    "graph_from_odometry",
    "CameraModel",
    "DepthFrame",
    "SurfelMap",
    "Fragment",
    "fuse_frame",
    "build_fragments",
    "assemble_model",
    "ConsistencyScore",
    "DepthConsistencyScorer",
    "render_depth",
    "score_map",
    "LoopCandidate",
    "SiftResult",
    "sift",
]
