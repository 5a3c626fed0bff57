"""Mesh I/O, build-direction rotation, slicing into a voxel stack and back."""

from __future__ import annotations

import logging
import math
import re
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mesofix.raster import BinaryRaster

log = logging.getLogger(__name__)


class MeshError(ValueError):
    """Unreadable, malformed or empty mesh input."""


class VoxelizationError(ValueError):
    """The mesh produced no slices at the requested resolution."""


class OpenBoundaryWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def bounds(self) -> np.ndarray:
        """(2, 3) array of min and max corners."""
        if len(self.vertices) == 0:
            raise MeshError("empty mesh has no bounds")
        used = self.vertices[np.unique(self.triangles)] if len(self.triangles) else self.vertices
        return np.array([used.min(axis=0), used.max(axis=0)])

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def edge_counts(self) -> dict[tuple[int, int], int]:
        """Undirected edge -> number of incident triangles."""
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        if self.is_empty():
            return False
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_wound(self) -> bool:
        """Each directed edge appears once and its reverse appears too."""
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        uniq, counts = np.unique(directed, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        fwd = {(int(a), int(b)) for a, b in uniq}
        return all((b, a) in fwd for a, b in fwd)

    def volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward winding)."""
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def clean_mesh(vertices: np.ndarray, triangles: np.ndarray) -> TriangleMesh:
    """Merge exactly coincident vertices and drop zero-area triangles."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0:
        raise MeshError("mesh has no triangles")
    uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
    tri = inverse.reshape(-1)[triangles]
    a, b, c = (uniq[tri[:, i]] for i in range(3))
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    keep = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2]) & (area2 > 0)
    tri = tri[keep]
    if len(tri) == 0:
        raise MeshError("mesh has only degenerate triangles")
    used, remap = np.unique(tri, return_inverse=True)
    return TriangleMesh(uniq[used], remap.reshape(-1, 3))


_STL_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")]
)
_ASCII_VERTEX = re.compile(
    rb"vertex\s+(\S+)\s+(\S+)\s+(\S+)", re.IGNORECASE
)


def _parse_binary_stl(data: bytes, path) -> np.ndarray:
    if len(data) < 84:
        raise MeshError(f"{path}: binary STL shorter than its 84-byte header")
    (count,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * count
    if len(data) < expected:
        actual = (len(data) - 84) // 50
        raise MeshError(
            f"{path}: binary STL header declares {count} triangles "
            f"but the file holds only {actual} ({len(data)} of {expected} bytes)"
        )
    records = np.frombuffer(data, dtype=_STL_RECORD, count=count, offset=84)
    return records["v"].astype(np.float64)


def _parse_ascii_stl(data: bytes, path) -> np.ndarray:
    try:
        coords = np.array(_ASCII_VERTEX.findall(data), dtype=np.float64)
    except ValueError as exc:
        raise MeshError(f"{path}: malformed ASCII STL vertex") from exc
    if len(coords) == 0 or len(coords) % 3:
        raise MeshError(f"{path}: ASCII STL has {len(coords)} vertices, not a multiple of 3")
    return coords.reshape(-1, 3, 3)


def _load_stl(path: Path) -> TriangleMesh:
    data = path.read_bytes()
    binary_size_ok = len(data) >= 84 and len(data) == 84 + 50 * struct.unpack_from("<I", data, 80)[0]
    if data.lstrip()[:5].lower() == b"solid" and not binary_size_ok:
        tris = _parse_ascii_stl(data, path)
    else:
        tris = _parse_binary_stl(data, path)
    if len(tris) == 0:
        raise MeshError(f"{path}: STL contains no triangles")
    vertices = tris.reshape(-1, 3)
    return clean_mesh(vertices, np.arange(len(vertices)).reshape(-1, 3))


def _load_obj(path: Path) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(c) for c in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(vertices) + i)
                    # fan triangulation of polygons
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    if not faces:
        raise MeshError(f"{path}: OBJ has no faces")
    v = np.array(vertices, dtype=np.float64)
    f = np.array(faces, dtype=np.int64)
    if f.min() < 0 or f.max() >= len(v):
        raise MeshError(f"{path}: face references a missing vertex")
    return clean_mesh(v, f)


def load_mesh(path) -> TriangleMesh:
    """Read binary/ASCII STL or OBJ, merging duplicate vertices."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".obj":
            return _load_obj(path)
        return _load_stl(path)
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def stl_bytes(mesh: TriangleMesh, header: bytes = b"mesofix binary STL") -> bytes:
    records = np.zeros(len(mesh.triangles), dtype=_STL_RECORD)
    records["normal"] = face_normals(mesh)
    records["v"] = mesh.vertices[mesh.triangles]
    return header[:80].ljust(80, b"\0") + struct.pack("<I", len(records)) + records.tobytes()


def obj_text(mesh: TriangleMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


def save_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    """Write binary STL (default) or OBJ, picking the format from the suffix."""
    if mesh.is_empty():
        raise MeshError("refusing to write an empty mesh")
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "stl").lower()
    if fmt == "stl":
        path.write_bytes(stl_bytes(mesh))
    elif fmt == "obj":
        path.write_text(obj_text(mesh), encoding="utf-8")
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")


@dataclass(frozen=True)
class Orientation:
    """Extrinsic rotation: about world x by ``theta1``, then world z by ``theta2``."""

    theta1: float = 0.0
    theta2: float = 0.0

    THETA1_BOUNDS = (-math.pi / 2, math.pi / 2)
    THETA2_BOUNDS = (0.0, math.pi)

    def __post_init__(self):
        lo1, hi1 = self.THETA1_BOUNDS
        lo2, hi2 = self.THETA2_BOUNDS
        if not lo1 <= self.theta1 <= hi1:
            raise ValueError(f"theta1={self.theta1} outside [{lo1}, {hi1}]")
        if not lo2 <= self.theta2 <= hi2:
            raise ValueError(f"theta2={self.theta2} outside [{lo2}, {hi2}]")
        object.__setattr__(self, "theta1", float(self.theta1))
        object.__setattr__(self, "theta2", float(self.theta2))

    @classmethod
    def clipped(cls, theta1: float, theta2: float) -> Orientation:
        return cls(
            float(np.clip(theta1, *cls.THETA1_BOUNDS)),
            float(np.clip(theta2, *cls.THETA2_BOUNDS)),
        )

    def matrix(self) -> np.ndarray:
        c1, s1 = math.cos(self.theta1), math.sin(self.theta1)
        c2, s2 = math.cos(self.theta2), math.sin(self.theta2)
        rx = np.array([[1, 0, 0], [0, c1, -s1], [0, s1, c1]])
        rz = np.array([[c2, -s2, 0], [s2, c2, 0], [0, 0, 1]])
        return rz @ rx

    def as_tuple(self) -> tuple[float, float]:
        return (self.theta1, self.theta2)

    def build_direction(self) -> np.ndarray:
        """The +z axis carried by the rotation: the layer normal in model coordinates."""
        return self.matrix()[:, 2]


def rotate_mesh(mesh: TriangleMesh, o: Orientation) -> TriangleMesh:
    """Apply ``o.matrix()`` to every vertex."""
    if o.theta1 == 0.0 and o.theta2 == 0.0:
        return mesh
    return TriangleMesh(mesh.vertices @ o.matrix().T, mesh.triangles)


def to_build_frame(mesh: TriangleMesh, o: Orientation) -> TriangleMesh:
    """Turn ``mesh`` so that ``o.build_direction()`` points up (+z).

    This is the inverse of :func:`rotate_mesh`. Both angles then matter:
    the reachable build directions cover the upper half-space.
    """
    if o.theta1 == 0.0 and o.theta2 == 0.0:
        return mesh
    return TriangleMesh(mesh.vertices @ o.matrix(), mesh.triangles)


@dataclass(frozen=True)
class VoxelizationStats:
    watertight: bool
    odd_parity_rows: int
    empty_slices: int


@dataclass(frozen=True, eq=False)
class SliceStack:
    """Layers bottom-up; slice ``i`` is the section at ``z_origin + (i + 0.5) * layer_height``."""

    slices: tuple[BinaryRaster, ...]
    layer_height: float
    z_origin: float = 0.0
    stats: VoxelizationStats | None = field(default=None, compare=False)

    def __post_init__(self):
        slices = tuple(self.slices)
        if not slices:
            raise ValueError("a slice stack needs at least one slice")
        if not self.layer_height > 0:
            raise ValueError(f"layer_height must be positive, got {self.layer_height}")
        for s in slices[1:]:
            slices[0].check_comparable(s)
        object.__setattr__(self, "slices", slices)

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i):
        return self.slices[i]

    def __iter__(self):
        return iter(self.slices)

    @property
    def in_plane_pitch(self) -> float:
        return self.slices[0].pitch

    @property
    def origin(self) -> tuple[float, float]:
        return self.slices[0].origin

    @property
    def shape(self) -> tuple[int, int, int]:
        """(layers, height, width)."""
        return (len(self.slices), self.slices[0].height, self.slices[0].width)

    def z_center(self, i: int) -> float:
        return self.z_origin + (i + 0.5) * self.layer_height

    def voxel_volume(self) -> float:
        return self.in_plane_pitch**2 * self.layer_height

    def count(self) -> int:
        return sum(s.count() for s in self.slices)

    def to_array(self) -> np.ndarray:
        return np.stack([s.bits for s in self.slices])

    def with_slices(self, slices) -> SliceStack:
        return SliceStack(tuple(slices), self.layer_height, self.z_origin)

    @classmethod
    def from_array(cls, voxels, layer_height: float, pitch: float, origin=(0.0, 0.0), z_origin=0.0):
        voxels = np.asarray(voxels, dtype=bool)
        return cls(tuple(BinaryRaster(v, pitch, origin) for v in voxels), layer_height, z_origin)

    def comparable(self, other: SliceStack) -> bool:
        return (
            len(self) == len(other)
            and self.layer_height == other.layer_height
            and self.z_origin == other.z_origin
            and self.slices[0].comparable(other.slices[0])
        )

    def __eq__(self, other):
        if not isinstance(other, SliceStack):
            return NotImplemented
        return self.comparable(other) and all(a == b for a, b in zip(self, other))

    __hash__ = None


def _axis_grid(lo: float, hi: float, pitch: float, padding: int) -> tuple[float, int]:
    """First pixel-center coordinate and pixel count, centered on [lo, hi]."""
    n = max(1, math.ceil((hi - lo) / pitch - 1e-9))
    first = 0.5 * (lo + hi) - 0.5 * (n - 1) * pitch
    return first - padding * pitch, n + 2 * padding


def section_segments(tri_xyz: np.ndarray, z: float) -> np.ndarray:
    """Segments (k, 2, 2) where triangles cross the plane at height ``z``.

    Vertices on the plane count as above it, which is the same as nudging
    them up by an infinitesimal amount.
    """
    above = tri_xyz[:, :, 2] >= z
    n_above = above.sum(axis=1)
    crossing = (n_above == 1) | (n_above == 2)
    tri = tri_xyz[crossing]
    above = above[crossing]
    if len(tri) == 0:
        return np.zeros((0, 2, 2))
    pts = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = tri[:, i], tri[:, j]
        cut = above[:, i] != above[:, j]
        t = np.where(cut, (z - a[:, 2]) / np.where(cut, b[:, 2] - a[:, 2], 1.0), 0.0)
        p = a[:, :2] + t[:, None] * (b[:, :2] - a[:, :2])
        pts.append((cut, p))
    # each crossing triangle has exactly two cut edges; take them in edge order
    cuts = np.stack([c for c, _ in pts], axis=1)
    coords = np.stack([p for _, p in pts], axis=1)
    order = np.argsort(~cuts, axis=1, kind="stable")[:, :2]
    return np.take_along_axis(coords, order[:, :, None], axis=1)


def rasterize_segments(
    segments: np.ndarray, width: int, height: int, pitch: float, origin: tuple[float, float]
) -> tuple[np.ndarray, int]:
    """Even-odd fill sampled at pixel centers.

    Returns the occupancy grid and the number of rows with an odd crossing
    count (a sign of an open boundary).
    """
    grid = np.zeros((height, width), dtype=bool)
    if len(segments) == 0:
        return grid, 0
    ox, oy = origin
    (x1, y1), (x2, y2) = segments[:, 0].T, segments[:, 1].T
    keep = y1 != y2
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    ylo, yhi = np.minimum(y1, y2), np.maximum(y1, y2)
    # rows whose center lies in [ylo, yhi)
    r0 = np.clip(np.ceil((ylo - oy) / pitch), 0, height).astype(np.int64)
    r1 = np.clip(np.ceil((yhi - oy) / pitch), 0, height).astype(np.int64)
    spans = r1 - r0
    total = int(spans.sum())
    if total == 0:
        return grid, 0
    seg_idx = np.repeat(np.arange(len(spans)), spans)
    starts = np.repeat(np.cumsum(spans) - spans, spans)
    rows = r0[seg_idx] + (np.arange(total) - starts)
    yc = oy + rows * pitch
    s = seg_idx
    xc = x1[s] + (yc - y1[s]) * (x2[s] - x1[s]) / (y2[s] - y1[s])
    # first pixel whose center is strictly right of the crossing
    col = np.clip(np.floor((xc - ox) / pitch).astype(np.int64) + 1, 0, width)
    toggles = np.zeros((height, width + 1), dtype=np.int32)
    np.add.at(toggles, (rows, col), 1)
    parity = np.cumsum(toggles, axis=1)
    grid = (parity[:, :width] & 1).astype(bool)
    odd_rows = int(np.count_nonzero(parity[:, width] & 1))
    return grid, odd_rows


def voxelize(
    mesh: TriangleMesh,
    layer_height: float,
    in_plane_pitch: float | None = None,
    padding: int = 0,
    *,
    like: SliceStack | None = None,
    threads: int = 1,
) -> SliceStack:
    """Slice ``mesh`` at every layer's center plane and fill each section.

    The grid is centered on the mesh's xy bounds with ``padding`` background
    pixels on every side; layers start at the mesh's lowest z. Pass ``like``
    to sample onto an existing stack's grid instead.
    """
    if mesh.is_empty():
        raise MeshError("cannot voxelize an empty mesh")
    pitch = layer_height if in_plane_pitch is None else in_plane_pitch
    if not (layer_height > 0 and pitch > 0):
        raise ValueError("layer_height and pitch must be positive")
    padding = int(padding)
    if padding < 0:
        raise ValueError("padding must be non-negative")

    lo, hi = mesh.bounds
    if like is not None:
        layer_height, pitch = like.layer_height, like.in_plane_pitch
        (ox, oy), z0 = like.origin, like.z_origin
        _, height, width = like.shape
        n_layers = len(like)
    else:
        ox, width = _axis_grid(lo[0], hi[0], pitch, padding)
        oy, height = _axis_grid(lo[1], hi[1], pitch, padding)
        z0 = float(lo[2])
        n_layers = math.ceil((hi[2] - lo[2]) / layer_height - 0.5 - 1e-12)
        if n_layers <= 0:
            raise VoxelizationError(
                f"mesh is {hi[2] - lo[2]:.4g} mm tall, thinner than half a "
                f"{layer_height} mm layer; no slices"
            )

    tri_xyz = mesh.vertices[mesh.triangles]
    tz_lo = tri_xyz[:, :, 2].min(axis=1)
    tz_hi = tri_xyz[:, :, 2].max(axis=1)
    order = np.argsort(tz_lo, kind="stable")
    tri_xyz, tz_lo, tz_hi = tri_xyz[order], tz_lo[order], tz_hi[order]

    def one_layer(i: int) -> tuple[np.ndarray, int]:
        z = z0 + (i + 0.5) * layer_height
        stop = np.searchsorted(tz_lo, z, side="left")
        cand = tri_xyz[:stop][tz_hi[:stop] >= z]
        segs = section_segments(cand, z)
        return rasterize_segments(segs, width, height, pitch, (ox, oy))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            layers = list(pool.map(one_layer, range(n_layers)))
    else:
        layers = [one_layer(i) for i in range(n_layers)]

    watertight = mesh.is_watertight()
    odd = sum(o for _, o in layers)
    empty = sum(1 for g, _ in layers if not g.any())
    if odd or not watertight:
        msg = f"mesh is not watertight ({odd} scanlines with odd crossing counts); using parity fill"
        log.warning(msg)
        warnings.warn(msg, OpenBoundaryWarning, stacklevel=2)
    slices = tuple(BinaryRaster(g, pitch, (ox, oy)) for g, _ in layers)
    if all(s.is_empty() for s in slices):
        raise VoxelizationError("voxelization produced only empty slices")
    return SliceStack(slices, layer_height, z0, VoxelizationStats(watertight, odd, empty))


def _vertex_group_table() -> np.ndarray:
    """table[config, cell] -> 6-connected group of ``cell`` in a 2x2x2 block.

    Cell index bits are (dx, dy, dz) = (bit0, bit1, bit2); face-adjacent
    cells differ in one bit. Splitting grid vertices by group keeps voxels
    that only touch along an edge or corner on separate surface sheets.
    """
    table = np.full((256, 8), -1, dtype=np.int8)
    for config in range(256):
        group = 0
        for start in range(8):
            if not (config >> start) & 1 or table[config, start] >= 0:
                continue
            stack = [start]
            table[config, start] = group
            while stack:
                c = stack.pop()
                for bit in (1, 2, 4):
                    n = c ^ bit
                    if (config >> n) & 1 and table[config, n] < 0:
                        table[config, n] = group
                        stack.append(n)
            group += 1
    return table


_VERTEX_GROUPS = _vertex_group_table()

# quad corners (dx, dy, dz) relative to the face's base grid vertex, wound
# counter-clockwise when seen from the positive side of the axis
_QUADS = {
    0: ((0, 0, 0), (0, 1, 0), (0, 1, 1), (0, 0, 1)),
    1: ((0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 0, 0)),
    2: ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)),
}


def extract_surface(v: SliceStack, method: str = "faces") -> TriangleMesh:
    """Boundary surface of the stack's foreground voxels.

    ``"faces"`` emits two triangles per exposed voxel face, wound outward.
    ``"marching_cubes"`` gives a smoothed surface through scikit-image.
    """
    vox = v.to_array()
    if not vox.any():
        raise MeshError("cannot extract a surface from an empty stack")
    pitch, h = v.in_plane_pitch, v.layer_height
    ox, oy = v.origin
    if method == "marching_cubes":
        return _marching_cubes(vox, pitch, h, ox, oy, v.z_origin)
    if method != "faces":
        raise ValueError(f"unknown surface method {method!r}")

    # work in (x, y, z) index order; pad so every face has an empty side
    P = np.pad(vox.transpose(2, 1, 0), 1)
    _, gy, gz = (n - 1 for n in P.shape)  # grid vertices per axis
    corners: list[np.ndarray] = []
    owners: list[np.ndarray] = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a, b = P[tuple(lo)], P[tuple(hi)]
        for positive, mask in ((True, a & ~b), (False, ~a & b)):
            idx = np.argwhere(mask)  # padded index of the lower cell
            if len(idx) == 0:
                continue
            # padded cell c spans grid vertices c-1 .. c, so the face's
            # minimal corner is idx - 1 off-axis and idx along the axis
            base = idx - 1
            base[:, axis] += 1
            owner = idx.copy()
            if not positive:
                owner[:, axis] += 1
            quad = np.array(_QUADS[axis])
            if not positive:
                quad = quad[::-1]
            corners.append(base[:, None, :] + quad[None, :, :])
            owners.append(np.repeat(owner[:, None, :], 4, axis=1))
    corner = np.concatenate(corners)  # (F, 4, 3) grid vertex indices
    owner = np.concatenate(owners)  # (F, 4, 3) padded owner cell

    # grid vertex g touches padded cells g .. g+1 on each axis
    local = owner - corner
    cell_bit = local[..., 0] + 2 * local[..., 1] + 4 * local[..., 2]
    config = np.zeros(corner.shape[:2], dtype=np.int64)
    for bit in range(8):
        dx, dy, dz = bit & 1, (bit >> 1) & 1, (bit >> 2) & 1
        occ = P[corner[..., 0] + dx, corner[..., 1] + dy, corner[..., 2] + dz]
        config |= occ.astype(np.int64) << bit
    group = _VERTEX_GROUPS[config, cell_bit].astype(np.int64)
    flat = ((corner[..., 0] * gy + corner[..., 1]) * gz + corner[..., 2]) * 8 + group
    keys, inverse = np.unique(flat.ravel(), return_inverse=True)
    inverse = inverse.reshape(-1, 4)

    g = keys // 8
    gk = g % gz
    gj = (g // gz) % gy
    gi = g // (gz * gy)
    # padded cell c covers grid vertices c-1 .. c; unpadded pixel i has center ox + i*pitch
    verts = np.column_stack(
        [
            ox + (gi - 0.5) * pitch,
            oy + (gj - 0.5) * pitch,
            v.z_origin + gk * h,
        ]
    )
    # two triangles per face, kept adjacent
    tris = np.stack([inverse[:, [0, 1, 2]], inverse[:, [0, 2, 3]]], axis=1).reshape(-1, 3)
    owner_key = np.repeat(
        (owner[:, 0, 0] * P.shape[1] + owner[:, 0, 1]) * P.shape[2] + owner[:, 0, 2], 2
    )
    verts, tris = _split_pinched_edges(verts, tris, owner_key)
    return TriangleMesh(verts, tris)


def _split_pinched_edges(verts: np.ndarray, tris: np.ndarray, owner: np.ndarray):
    """Separate edges still carrying four triangles after vertex splitting.

    This happens when two voxels meet only along an edge but are joined
    through other voxels around both endpoints. One voxel's two triangles
    get a fresh midpoint vertex on that edge, turning the shared edge into
    two coincident but distinct edges.
    """
    edges = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, inv, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    pinched = np.flatnonzero(counts > 2)
    if pinched.size == 0:
        return verts, tris
    inv = inv.reshape(-1)
    tri_list = [list(t) for t in tris.tolist()]
    owners = owner.tolist()
    vert_list = verts.tolist()
    n_orig = len(tri_list)
    for e in pinched:
        a, b = (int(x) for x in uniq[e])
        incident = [int(i) for i in np.flatnonzero(inv == e) // 3]
        # an earlier split may have moved this edge onto an appended triangle
        incident += range(n_orig, len(tri_list))
        incident = [i for i in incident if a in tri_list[i] and b in tri_list[i]]
        split_owner = max(owners[i] for i in incident)
        mid = len(vert_list)
        vert_list.append(((verts[a] + verts[b]) / 2).tolist())
        for i in incident:
            if owners[i] != split_owner:
                continue
            t = tri_list[i]
            k = next(k for k in range(3) if {t[k], t[(k + 1) % 3]} == {a, b})
            p, q, r = t[k], t[(k + 1) % 3], t[(k + 2) % 3]
            tri_list[i] = [p, mid, r]
            tri_list.append([mid, q, r])
            owners.append(owners[i])
    return np.array(vert_list), np.array(tri_list, dtype=np.int64)


def _marching_cubes(vox, pitch, h, ox, oy, z0) -> TriangleMesh:
    from skimage import measure

    field_ = np.pad(vox.transpose(2, 1, 0).astype(np.float32), 1)
    verts, faces, _, _ = measure.marching_cubes(field_, 0.5, spacing=(pitch, pitch, h))
    verts = verts + np.array([ox - pitch, oy - pitch, z0 + 0.5 * h - h])
    # skimage winds toward increasing values; flip for outward normals
    return TriangleMesh(verts, faces[:, ::-1])
