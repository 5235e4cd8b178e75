"""Object pose estimation from dense NOCS correspondence maps.

Single-view poses come from PnP or Kabsch inside RANSAC; several calibrated
views can then be refined jointly by render-and-compare against the maps.
"""
from .correspondence import (
    BoundingBox,
    CorrespondenceSet,
    InsufficientCorrespondences,
    NocsMap,
    NoiseConfig,
    decode,
    discretize,
    extract_2d3d,
    extract_3d3d,
    simulate_prediction,
)
from .geometry import CameraIntrinsics, GeometryError, Mesh, NocsBounds, Pose, compute_nocs_bounds, load_mesh
from .metrics import EvalRecord, add_metric, add_recall, summarize
from .raster import RenderOutput, render
from .refine import MultiViewSet, RefinerConfig, RobustParams, ViewFrame, refine, refine_detailed, sample_views
from .solvers import RansacConfig, kabsch_ransac, pnp_ransac
from .symmetry import NO_SYMMETRY, SymmetrySpec, disambiguate

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "CameraIntrinsics", "CorrespondenceSet", "EvalRecord", "GeometryError",
    "InsufficientCorrespondences", "Mesh", "MultiViewSet", "NO_SYMMETRY", "NocsBounds", "NocsMap",
    "NoiseConfig", "Pose", "RansacConfig", "RefinerConfig", "RenderOutput", "RobustParams",
    "SymmetrySpec", "ViewFrame", "add_metric", "add_recall", "compute_nocs_bounds", "decode",
    "discretize", "disambiguate", "extract_2d3d", "extract_3d3d", "kabsch_ransac", "load_mesh",
    "pnp_ransac", "refine", "refine_detailed", "render", "sample_views", "simulate_prediction",
    "summarize",
]
