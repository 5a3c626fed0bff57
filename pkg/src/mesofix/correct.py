"""Per-slice shape correction, stack assembly and reporting."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from mesofix.raster import (
    BinaryRaster,
    StructuringElement,
    dilate_bits,
    erode_bits,
    symmetric_diff_counts,
)
from mesofix.skeleton import max_element_diameter, meso_skeleton
from mesofix.volume import SliceStack, TriangleMesh, extract_surface

log = logging.getLogger(__name__)

REPORT_SCHEMA = "mesofix.correction_report/1"
DEFAULT_CLAMP_MM = (0.6, 1.2)


@dataclass(frozen=True)
class SliceCorrection:
    corrected: BinaryRaster
    added: int
    removed: int
    skeleton_iterations: int
    max_element_diameter_px: int | None = None
    skeleton: BinaryRaster | None = field(default=None, repr=False)


def correct_slice(
    s: BinaryRaster,
    f: StructuringElement,
    *,
    spur_removal: bool = True,
    anchor: str = "protect",
    analyze: bool = False,
    keep_skeleton: bool = False,
) -> SliceCorrection:
    """Dilate the slice's meso-skeleton by ``f``."""
    result = meso_skeleton(s, f, spur_removal=spur_removal, anchor=anchor)
    corrected = s.like(dilate_bits(result.skeleton.bits, f))
    added, removed = symmetric_diff_counts(s, corrected)
    return SliceCorrection(
        corrected=corrected,
        added=added,
        removed=removed,
        skeleton_iterations=result.iterations,
        max_element_diameter_px=max_element_diameter(s) if analyze else None,
        skeleton=result.skeleton if keep_skeleton else None,
    )


@dataclass
class LayerSummary:
    index: int
    z_mm: float
    added: int
    removed: int
    skeleton_iterations: int
    max_elem_px: int | None
    max_elem_mm: float | None


@dataclass
class CorrectionReport:
    parameters: dict
    layers: list[LayerSummary]
    voxel_volume_mm3: float

    @property
    def total_added(self) -> int:
        return sum(layer.added for layer in self.layers)

    @property
    def total_removed(self) -> int:
        return sum(layer.removed for layer in self.layers)

    @property
    def objective(self) -> int:
        return self.total_added + self.total_removed

    def totals(self) -> dict:
        return {
            "added_vox": self.total_added,
            "removed_vox": self.total_removed,
            "added_mm3": self.total_added * self.voxel_volume_mm3,
            "removed_mm3": self.total_removed * self.voxel_volume_mm3,
            "objective": self.objective,
        }

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "parameters": self.parameters,
            "layers": [
                {
                    "index": layer.index,
                    "z_mm": layer.z_mm,
                    "added": layer.added,
                    "removed": layer.removed,
                    "max_elem_px": layer.max_elem_px,
                    "max_elem_mm": layer.max_elem_mm,
                }
                for layer in self.layers
            ],
            "totals": self.totals(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def correct_model(
    v: SliceStack,
    f: StructuringElement,
    *,
    threads: int = 1,
    spur_removal: bool = True,
    anchor: str = "protect",
    analyze: bool = True,
    parameters: dict | None = None,
) -> tuple[SliceStack, CorrectionReport]:
    """Correct every slice independently and collect the report.

    Slices are processed on ``threads`` workers; the result does not depend
    on the worker count.
    """
    pitch = v.in_plane_pitch

    def work(s: BinaryRaster) -> SliceCorrection:
        return correct_slice(s, f, spur_removal=spur_removal, anchor=anchor, analyze=analyze)

    corrections = _map(work, v.slices, threads)
    layers = [
        LayerSummary(
            index=i,
            z_mm=v.z_center(i),
            added=c.added,
            removed=c.removed,
            skeleton_iterations=c.skeleton_iterations,
            max_elem_px=c.max_element_diameter_px,
            max_elem_mm=None if c.max_element_diameter_px is None else c.max_element_diameter_px * pitch,
        )
        for i, c in enumerate(corrections)
    ]
    params = {
        "min_feature_diameter_mm": f.diameter_mm,
        "radius_px": f.radius_px,
        "in_plane_pitch_mm": pitch,
        "layer_height_mm": v.layer_height,
        "spur_removal": spur_removal,
        "anchor": anchor,
        "layers": len(v),
        "image_size": [v.shape[2], v.shape[1]],
    }
    params.update(parameters or {})
    report = CorrectionReport(params, layers, v.voxel_volume())
    corrected = v.with_slices(c.corrected for c in corrections)
    return corrected, report


def open_model(v: SliceStack, f: StructuringElement, threads: int = 1) -> SliceStack:
    """Conventional per-slice opening, i.e. what a plain slicer would print."""
    return v.with_slices(
        _map(lambda s: s.like(dilate_bits(erode_bits(s.bits, f), f)), v.slices, threads)
    )


@dataclass
class StackDiff:
    added: int
    removed: int
    per_layer: list[tuple[int, int]]
    added_voxels: SliceStack
    removed_voxels: SliceStack

    def meshes(self) -> tuple[TriangleMesh | None, TriangleMesh | None]:
        """Surfaces of the added and removed material (None when empty)."""
        return (
            extract_surface(self.added_voxels) if self.added else None,
            extract_surface(self.removed_voxels) if self.removed else None,
        )


def diff_stacks(a: SliceStack, b: SliceStack) -> StackDiff:
    """Voxels added and removed going from ``a`` to ``b``."""
    if not a.comparable(b):
        raise ValueError("slice stacks have different grids")
    per_layer = [symmetric_diff_counts(sa, sb) for sa, sb in zip(a, b)]
    added = a.with_slices(sa.like(sb.bits & ~sa.bits) for sa, sb in zip(a, b))
    removed = a.with_slices(sa.like(sa.bits & ~sb.bits) for sa, sb in zip(a, b))
    return StackDiff(
        added=sum(p[0] for p in per_layer),
        removed=sum(p[1] for p in per_layer),
        per_layer=per_layer,
        added_voxels=added,
        removed_voxels=removed,
    )


@dataclass
class LayerElementSize:
    index: int
    z_mm: float
    raw_px: int | None
    raw_mm: float | None
    clamped_mm: float


def element_size_report(
    v: SliceStack,
    clamp_mm: tuple[float, float] = DEFAULT_CLAMP_MM,
    *,
    mode: str = "local",
    threads: int = 1,
) -> list[LayerElementSize]:
    """Largest printable element per layer, raw and clamped to ``clamp_mm``.

    An empty layer has no bound (``raw_px`` is None) and clamps to the
    range maximum.
    """
    lo, hi = clamp_mm
    if not 0 <= lo <= hi:
        raise ValueError(f"bad clamp range {clamp_mm}")
    pitch = v.in_plane_pitch
    raw = _map(lambda s: max_element_diameter(s, mode), v.slices, threads)
    out = []
    for i, px in enumerate(raw):
        mm = None if px is None else px * pitch
        clamped = hi if mm is None else float(np.clip(mm, lo, hi))
        out.append(LayerElementSize(i, v.z_center(i), px, mm, clamped))
    return out


def element_sizes_to_dict(rows: list[LayerElementSize], clamp_mm, parameters: dict | None = None) -> dict:
    return {
        "schema": "mesofix.element_sizes/1",
        "parameters": {"clamp_mm": list(clamp_mm), **(parameters or {})},
        "layers": [asdict(r) for r in rows],
    }
