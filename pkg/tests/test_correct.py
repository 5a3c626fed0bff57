import json

import numpy as np
import pytest

from helpers import blobby_bits
from mesofix.correct import (
    REPORT_SCHEMA,
    correct_model,
    correct_slice,
    diff_stacks,
    element_size_report,
    element_sizes_to_dict,
    open_model,
)
from mesofix.primitives import box, finned_cylinder, hollow_sphere
from mesofix.raster import (
    BinaryRaster,
    StructuringElement,
    connected_components,
    dilate,
    erode,
    euler_number,
    opening,
)
from mesofix.skeleton import meso_skeleton
from mesofix.volume import Orientation, SliceStack, to_build_frame, voxelize
from oracles import annulus_raster, disk_raster, quad_euler


def R(bits):
    return BinaryRaster(np.asarray(bits, dtype=bool))


def padded(bits, r):
    return R(np.pad(bits, r + 1))


def assert_slice_invariants(s: BinaryRaster, f: StructuringElement):
    c = correct_slice(s, f, keep_skeleton=True)
    assert opening(c.corrected, f) == c.corrected  # minimum feature guarantee
    assert opening(s, f).issubset(c.corrected)  # never less than the plain opening
    assert quad_euler(c.skeleton.bits) == quad_euler(s.bits)
    assert c.corrected == dilate(c.skeleton, f)
    added = int(np.count_nonzero(c.corrected.bits & ~s.bits))
    removed = int(np.count_nonzero(s.bits & ~c.corrected.bits))
    assert (c.added, c.removed) == (added, removed)
    return c


class TestCorrectSlice:
    def test_thin_shell_section_becomes_annulus(self):
        f = StructuringElement(3)
        s = padded(annulus_raster(20, 19), 3)
        assert opening(s, f).is_empty()
        c = assert_slice_invariants(s, f)
        assert euler_number(c.corrected) == 0 and connected_components(c.corrected)[1] == 1
        # radial profile through the ring is about 2r + 1 wide
        row = c.corrected.bits[s.height // 2]
        runs = np.diff(np.flatnonzero(np.diff(np.r_[0, row.astype(int), 0])))[::2]
        assert all(abs(int(w) - 7) <= 1 for w in runs)

    def test_thick_block_is_near_identity(self):
        bits = np.zeros((60, 60), dtype=bool)
        bits[10:50, 10:50] = True
        f = StructuringElement(2)
        s = R(bits)
        c = assert_slice_invariants(s, f)
        # only the block corners may change, and no more than opening changes them
        assert c.added == 0
        assert c.removed <= s.count() - opening(s, f).count()

    def test_thin_features_are_thickened(self):
        f = StructuringElement(2)
        bits = np.zeros((60, 90), dtype=bool)
        bits[10:40, 5:25] = True  # block A
        bits[10:40, 55:75] = True  # block B
        bits[25, 25:55] = True  # (1) thin connector
        bits[40:55, 15] = True  # (2) protrusion
        bits[5:7, 60:88] = True  # (3) thin wall, 2 px
        s = padded(bits, 2)
        c = assert_slice_invariants(s, f)
        p = 3  # padding offset
        assert opening(s, f).bits[25 + p, 26 + p : 54 + p].sum() == 0  # plain opening loses the connector
        assert connected_components(c.corrected)[1] == connected_components(s)[1]
        # every feature now contains a full disk of radius r
        core = erode(c.corrected, f)
        assert core.bits[25 + p, 40 + p], "connector"
        assert core.bits[46 + p, 15 + p], "protrusion"
        assert core.bits[5 + p : 7 + p, 75 + p].any(), "wall"

    def test_empty(self):
        c = correct_slice(R(np.zeros((5, 5))), StructuringElement(2), analyze=True)
        assert c.corrected.is_empty() and (c.added, c.removed) == (0, 0)
        assert c.max_element_diameter_px is None

    def test_random_slices(self, rng):
        for _ in range(60):
            r = int(rng.integers(1, 4))
            bits = blobby_bits(rng, (30, 30), rng.uniform(0.45, 0.7))
            assert_slice_invariants(padded(bits, r), StructuringElement(r))

    def test_radius_zero_is_identity(self, rng):
        s = R(blobby_bits(rng, (20, 20)))
        c = correct_slice(s, StructuringElement(0))
        assert c.corrected == s and (c.added, c.removed) == (0, 0)


def cube_stack(r):
    return voxelize(box((10, 10, 10)), 0.5, 0.5, padding=r + 1)


class TestCorrectModel:
    def test_cube(self):
        f = StructuringElement.from_diameter(2.0, 0.5)
        v = cube_stack(f.radius_px)
        out, report = correct_model(v, f)
        assert out.comparable(v) and len(out) == len(v)
        assert all(not s.is_empty() for s in out)
        band = sum(s.count() - erode(s, StructuringElement(1)).count() for s in v)
        assert report.objective <= band
        baseline = open_model(v, f)
        assert report.objective == sum(a.count() - b.count() for a, b in zip(v, baseline))

    def test_hollow_sphere_keeps_every_layer(self):
        f = StructuringElement.from_diameter(1.2, 0.2)
        v = voxelize(hollow_sphere(6, 1.0, rings=64, segments=128), 0.2, 0.2, padding=f.radius_px + 1)
        out, report = correct_model(v, f, analyze=False)
        assert any(o.is_empty() for o in open_model(v, f))
        assert all(not c.is_empty() for s, c in zip(v, out) if not s.is_empty())
        assert report.total_added > 0

    def test_identity_element(self):
        v = cube_stack(0)
        out, report = correct_model(v, StructuringElement(0))
        assert out == v and report.objective == 0

    def test_monotone_cost(self):
        m = to_build_frame(finned_cylinder(radius=2, length=6, fin_radius=3, fin_pitch=1.6, axis="y"), Orientation())
        v = voxelize(m, 0.2, 0.2, padding=5)
        costs = [correct_model(v, StructuringElement(r), analyze=False)[1].objective for r in range(4)]
        assert costs[0] == 0 and costs == sorted(costs)

    def test_report(self):
        f = StructuringElement.from_diameter(1.0, 0.5)
        v = cube_stack(f.radius_px)
        _, report = correct_model(v, f, parameters={"orientation": [0.0, 0.0]})
        d = json.loads(report.to_json())
        assert d["schema"] == REPORT_SCHEMA
        assert d["parameters"]["orientation"] == [0.0, 0.0]
        assert d["parameters"]["min_feature_diameter_mm"] == 1.0 and d["parameters"]["radius_px"] == 1
        assert len(d["layers"]) == len(v)
        layer = d["layers"][3]
        assert set(layer) == {"index", "z_mm", "added", "removed", "max_elem_px", "max_elem_mm"}
        assert layer["z_mm"] == pytest.approx(v.z_center(3))
        t = d["totals"]
        assert t["objective"] == t["added_vox"] + t["removed_vox"] == sum(
            x["added"] + x["removed"] for x in d["layers"]
        )
        assert t["removed_mm3"] == pytest.approx(t["removed_vox"] * 0.5**3)

    def test_deterministic_across_threads(self, rng):
        vox = np.stack([np.pad(blobby_bits(rng, (40, 40), 0.6), 4) for _ in range(8)])
        v = SliceStack.from_array(vox, 0.2, 0.2)
        f = StructuringElement(2)
        ref_stack, ref_report = correct_model(v, f, threads=1)
        for threads in (2, 4):
            out, report = correct_model(v, f, threads=threads)
            assert out == ref_stack and report.to_json() == ref_report.to_json()


class TestDiffStacks:
    def test_equal(self):
        v = cube_stack(1)
        d = diff_stacks(v, v)
        assert (d.added, d.removed) == (0, 0) and d.meshes() == (None, None)

    def test_one_voxel(self):
        v = cube_stack(1)
        arr = v.to_array()
        arr[0, 0, 0] = True
        w = SliceStack.from_array(arr, v.layer_height, v.in_plane_pitch, v.origin, v.z_origin)
        d = diff_stacks(v, w)
        assert (d.added, d.removed) == (1, 0) and d.per_layer[0] == (1, 0)
        added_mesh, removed_mesh = d.meshes()
        assert len(added_mesh.triangles) == 12 and removed_mesh is None

    def test_incomparable(self):
        with pytest.raises(ValueError):
            diff_stacks(cube_stack(1), cube_stack(2))

    def test_horizontal_finned_cylinder(self):
        f = StructuringElement.from_diameter(1.2, 0.2)
        v = voxelize(finned_cylinder(axis="y"), 0.2, 0.2, padding=f.radius_px + 1)
        out, _ = correct_model(v, f, analyze=False)
        d = diff_stacks(v, out)
        assert d.added > 0 and d.removed > 0


class TestElementSizeReport:
    def test_disks(self):
        vox = np.stack([disk_raster(10)] * 3)
        v = SliceStack.from_array(vox, 0.1, 0.05)
        rows = element_size_report(v, (0.6, 1.2))
        for row in rows:
            assert abs(row.raw_px - 20) <= 2
            assert row.raw_mm == pytest.approx(row.raw_px * 0.05)
            assert row.clamped_mm == pytest.approx(np.clip(row.raw_mm, 0.6, 1.2))

    def test_membrane_and_empty_layers(self):
        body = np.zeros((50, 70), dtype=bool)
        body[5:45, 5:45] = True
        membrane = body.copy()
        membrane[24, 45:65] = True
        vox = np.stack([body, membrane, np.zeros_like(body)])
        rows = element_size_report(SliceStack.from_array(vox, 0.2, 0.1), (0.6, 1.2))
        assert rows[0].clamped_mm == 1.2 and rows[0].raw_px >= 30
        assert rows[1].raw_px == 0 and rows[1].clamped_mm == 0.6
        assert rows[2].raw_px is None and rows[2].raw_mm is None and rows[2].clamped_mm == 1.2
        d = element_sizes_to_dict(rows, (0.6, 1.2))
        assert d["layers"][2]["raw_px"] is None and d["parameters"]["clamp_mm"] == [0.6, 1.2]
        json.dumps(d)

    def test_bad_clamp(self):
        with pytest.raises(ValueError):
            element_size_report(cube_stack(1), (1.0, 0.5))


def test_meso_skeleton_matches_correct_slice(rng):
    bits = np.pad(blobby_bits(rng, (30, 30)), 3)
    f = StructuringElement(2)
    c = correct_slice(R(bits), f, keep_skeleton=True)
    assert c.skeleton == meso_skeleton(R(bits), f).skeleton
