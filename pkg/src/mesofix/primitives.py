"""Closed triangle meshes for simple solids, used by tests and demos."""

from __future__ import annotations

import math

import numpy as np

from mesofix.volume import TriangleMesh, clean_mesh


def box(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with its minimum corner at ``origin``."""
    sx, sy, sz = size
    ox, oy, oz = origin
    v = np.array(
        [[ox + i * sx, oy + j * sy, oz + k * sz] for k in (0, 1) for j in (0, 1) for i in (0, 1)],
        dtype=np.float64,
    )
    # vertex index = i + 2j + 4k
    quads = [
        (0, 2, 3, 1),  # z-
        (4, 5, 7, 6),  # z+
        (0, 1, 5, 4),  # y-
        (2, 6, 7, 3),  # y+
        (0, 4, 6, 2),  # x-
        (1, 3, 7, 5),  # x+
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


def revolve(profile, segments: int = 64) -> TriangleMesh:
    """Surface of revolution about the z axis.

    ``profile`` is a list of ``(r, z)`` points. If it starts and ends on the
    axis (``r == 0``) it is an open path from bottom pole to top pole;
    otherwise it is treated as a closed loop, which must run
    counter-clockwise in the (r, z) plane for outward normals.
    """
    prof = np.asarray(profile, dtype=np.float64)
    closed = not (prof[0, 0] == 0 and prof[-1, 0] == 0)
    if closed:
        prof = np.vstack([prof, prof[:1]])
    angles = 2 * math.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    n = len(prof)
    verts = np.empty((n, segments, 3))
    verts[:, :, 0] = prof[:, 0:1] * ring[None, :, 0]
    verts[:, :, 1] = prof[:, 0:1] * ring[None, :, 1]
    verts[:, :, 2] = prof[:, 1:2]
    idx = np.arange(n * segments).reshape(n, segments)
    tris = []
    for i in range(n - 1):
        a = idx[i]
        b = np.roll(idx[i], -1)
        c = np.roll(idx[i + 1], -1)
        d = idx[i + 1]
        tris.append(np.stack([a, b, c], axis=1))
        tris.append(np.stack([a, c, d], axis=1))
    # clean_mesh collapses the rings at r == 0 and drops the degenerate triangles
    return clean_mesh(verts.reshape(-1, 3), np.concatenate(tris))


def combine(*meshes: TriangleMesh) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def flipped(mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(mesh.vertices, mesh.triangles[:, ::-1])


def translated(mesh: TriangleMesh, offset) -> TriangleMesh:
    return TriangleMesh(mesh.vertices + np.asarray(offset, dtype=np.float64), mesh.triangles)


def _sphere_profile(radius: float, rings: int):
    phi = np.linspace(-math.pi / 2, math.pi / 2, rings + 1)
    r = radius * np.cos(phi)
    r[0] = r[-1] = 0.0
    return np.stack([r, radius * np.sin(phi)], axis=1)


def sphere(radius: float, rings: int = 48, segments: int = 96, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    return translated(revolve(_sphere_profile(radius, rings), segments), center)


def hollow_sphere(
    outer_radius: float, wall: float, rings: int = 96, segments: int = 192, center=(0.0, 0.0, 0.0)
) -> TriangleMesh:
    """Spherical shell: outer surface plus an inward-facing cavity."""
    outer = revolve(_sphere_profile(outer_radius, rings), segments)
    inner = flipped(revolve(_sphere_profile(outer_radius - wall, rings), segments))
    return translated(combine(outer, inner), center)


def cylinder(radius: float, height: float, segments: int = 64) -> TriangleMesh:
    return revolve([(0, 0), (radius, 0), (radius, height), (0, height)], segments)


def tube(outer_radius: float, inner_radius: float, height: float, segments: int = 64) -> TriangleMesh:
    loop = [(inner_radius, 0), (outer_radius, 0), (outer_radius, height), (inner_radius, height)]
    return revolve(loop, segments)


def finned_cylinder(
    radius: float = 4.0,
    length: float = 16.0,
    fin_radius: float = 6.0,
    fin_thickness: float = 0.8,
    fin_pitch: float = 2.4,
    segments: int = 64,
    axis: str = "z",
) -> TriangleMesh:
    """Cylinder carrying evenly spaced thin annular fins (a thread stand-in).

    With ``axis="y"`` the part lies horizontally along +y, so the default
    build direction slices across the fins.
    """
    prof = [(0.0, 0.0), (radius, 0.0)]
    z = fin_pitch - fin_thickness / 2
    while z + fin_thickness < length - fin_pitch / 2 + 1e-9:
        prof += [(radius, z), (fin_radius, z), (fin_radius, z + fin_thickness), (radius, z + fin_thickness)]
        z += fin_pitch
    prof += [(radius, length), (0.0, length)]
    mesh = revolve(prof, segments)
    if axis == "z":
        return mesh
    if axis == "y":
        # rotate -90 degrees about x: z -> y
        v = mesh.vertices
        return TriangleMesh(np.column_stack([v[:, 0], v[:, 2], -v[:, 1]]), mesh.triangles)
    raise ValueError(f"axis must be 'z' or 'y', got {axis!r}")
