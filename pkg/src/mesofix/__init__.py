"""Printability correction of 3D models via topology-preserving meso-skeletons."""

from mesofix.raster import BinaryRaster, StructuringElement, dilate, erode, opening
from mesofix.skeleton import max_element_diameter, meso_skeleton, thin_pass
from mesofix.volume import (
    Orientation,
    SliceStack,
    TriangleMesh,
    extract_surface,
    load_mesh,
    rotate_mesh,
    to_build_frame,
    save_mesh,
    voxelize,
)
from mesofix.correct import correct_model, correct_slice, diff_stacks, element_size_report
from mesofix.orient import AnnealConfig, anneal, evaluate_objective

__all__ = [
    "AnnealConfig",
    "BinaryRaster",
    "Orientation",
    "SliceStack",
    "StructuringElement",
    "TriangleMesh",
    "anneal",
    "correct_model",
    "correct_slice",
    "diff_stacks",
    "dilate",
    "element_size_report",
    "erode",
    "evaluate_objective",
    "extract_surface",
    "load_mesh",
    "max_element_diameter",
    "meso_skeleton",
    "opening",
    "rotate_mesh",
    "to_build_frame",
    "save_mesh",
    "thin_pass",
    "voxelize",
]

__version__ = "0.1.0"
