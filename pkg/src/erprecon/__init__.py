"""Multi-view stereo, TSDF fusion and evaluation for equirectangular 360-degree images."""

from .camera import ErpIntrinsics, Pose, project, unproject
from .features import FeatureMap, classical_features
from .mesh import TriangleMesh
from .sweep import DepthMap, extract_depth, make_hypotheses, sweep

__all__ = [
    "DepthMap",
    "ErpIntrinsics",
    "FeatureMap",
    "Pose",
    "TriangleMesh",
    "classical_features",
    "extract_depth",
    "make_hypotheses",
    "project",
    "sweep",
    "unproject",
]

__version__ = "0.1.0"
