"""Binary slice rasters and the morphology/topology primitives built on them.

Rasters are stored as ``(height, width)`` boolean arrays indexed ``bits[y, x]``.
Row index grows with the model's +y axis, so row 0 is the bottom of the slice.
Everything outside the array reads as background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

# (dx, dy) for x1..x8: east first, counter-clockwise, +y is "north".
NEIGHBOR_OFFSETS: tuple[tuple[int, int], ...] = (
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
)

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


class IncomparableRasterError(ValueError):
    """Raised when two rasters with different grids are combined."""


@dataclass(frozen=True, eq=False)
class BinaryRaster:
    """One slice as an immutable bit grid with physical placement.

    ``origin`` is the model-frame (x, y) position in mm of the center of
    pixel (0, 0); ``pitch`` is the pixel edge length in mm.
    """

    bits: np.ndarray
    pitch: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"raster needs a non-empty 2D grid, got shape {bits.shape}")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def empty(cls, width: int, height: int, pitch: float = 1.0, origin=(0.0, 0.0)) -> BinaryRaster:
        return cls(np.zeros((height, width), dtype=bool), pitch, origin)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def like(self, bits: np.ndarray) -> BinaryRaster:
        """New raster on the same grid with different occupancy."""
        if bits.shape != self.bits.shape:
            raise ValueError(f"shape {bits.shape} does not match {self.bits.shape}")
        return BinaryRaster(bits, self.pitch, self.origin)

    def comparable(self, other: BinaryRaster) -> bool:
        return (
            self.bits.shape == other.bits.shape
            and self.pitch == other.pitch
            and self.origin == other.origin
        )

    def check_comparable(self, other: BinaryRaster) -> None:
        if not self.comparable(other):
            raise IncomparableRasterError(
                f"raster grids differ: {self.width}x{self.height} @ {self.pitch} {self.origin}"
                f" vs {other.width}x{other.height} @ {other.pitch} {other.origin}"
            )

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()

    def issubset(self, other: BinaryRaster) -> bool:
        self.check_comparable(other)
        return not np.any(self.bits & ~other.bits)

    def __eq__(self, other):
        if not isinstance(other, BinaryRaster):
            return NotImplemented
        return self.comparable(other) and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __or__(self, other: BinaryRaster) -> BinaryRaster:
        self.check_comparable(other)
        return self.like(self.bits | other.bits)

    def __and__(self, other: BinaryRaster) -> BinaryRaster:
        self.check_comparable(other)
        return self.like(self.bits & other.bits)

    def __sub__(self, other: BinaryRaster) -> BinaryRaster:
        self.check_comparable(other)
        return self.like(self.bits & ~other.bits)

    def __repr__(self):
        return (
            f"BinaryRaster({self.width}x{self.height}, pitch={self.pitch}, "
            f"origin={self.origin}, count={self.count()})"
        )


def radius_from_diameter(diameter_mm: float, pitch: float) -> int:
    """Integer disk radius in pixels, rounding half up."""
    if diameter_mm < 0:
        raise ValueError(f"diameter must be non-negative, got {diameter_mm}")
    if not pitch > 0:
        raise ValueError(f"pitch must be positive, got {pitch}")
    # the epsilon keeps exact halves like 1.2 / (2 * 0.4) from rounding down
    return int(math.floor(diameter_mm / (2.0 * pitch) + 0.5 + 1e-9))


def disk_offsets(radius_px: int) -> tuple[tuple[int, int], ...]:
    r = int(radius_px)
    return tuple(
        (dx, dy)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dx * dx + dy * dy <= r * r
    )


@dataclass(frozen=True)
class StructuringElement:
    """Closed rasterized disk ``dx**2 + dy**2 <= radius_px**2``."""

    radius_px: int
    diameter_mm: float | None = None

    def __post_init__(self):
        if int(self.radius_px) != self.radius_px or self.radius_px < 0:
            raise ValueError(f"radius_px must be a non-negative integer, got {self.radius_px}")
        object.__setattr__(self, "radius_px", int(self.radius_px))

    @classmethod
    def from_diameter(cls, diameter_mm: float, pitch: float) -> StructuringElement:
        return cls(radius_from_diameter(diameter_mm, pitch), float(diameter_mm))

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        return disk_offsets(self.radius_px)

    def row_half_widths(self) -> list[tuple[int, int]]:
        """(dy, half_width) for each disk row."""
        r = self.radius_px
        return [(dy, math.isqrt(r * r - dy * dy)) for dy in range(-r, r + 1)]

    def footprint(self) -> np.ndarray:
        r = self.radius_px
        fp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
        for dx, dy in self.offsets:
            fp[dy + r, dx + r] = True
        return fp


@dataclass(frozen=True)
class Neighborhood:
    """Snapshot of the 8 neighbors of a pixel, ``x[0]`` holding x1 (east)."""

    x: tuple[int, ...]

    def __post_init__(self):
        if len(self.x) != 8:
            raise ValueError("a neighborhood has exactly 8 values")
        object.__setattr__(self, "x", tuple(1 if v else 0 for v in self.x))

    def __getitem__(self, k: int) -> int:
        """1-based access with wraparound, so ``n[9] == n[1]``."""
        return self.x[(k - 1) % 8]

    @property
    def code(self) -> int:
        return sum(v << i for i, v in enumerate(self.x))

    @classmethod
    def from_code(cls, code: int) -> Neighborhood:
        return cls(tuple((code >> i) & 1 for i in range(8)))


def _bbox(bits: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(bits.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def _shift_words(a: np.ndarray, s: int) -> np.ndarray:
    """Bit ``c`` of each result row is bit ``c + s`` of the packed row; zeros shift in."""
    if s == 0:
        return a
    n = a.shape[1]
    q, b = divmod(abs(s), 64)
    if q >= n:
        return np.zeros_like(a)
    out = np.empty_like(a)
    lo, hi = np.uint64(b), np.uint64(64 - b)
    if s > 0:
        src = a[:, q:]
        out[:, n - q :] = 0
        if b == 0:
            out[:, : n - q] = src
        else:
            np.right_shift(src, lo, out=out[:, : n - q])
            out[:, : n - q - 1] |= src[:, 1:] << hi
    else:
        src = a[:, : n - q]
        out[:, :q] = 0
        if b == 0:
            out[:, q:] = src
        else:
            np.left_shift(src, lo, out=out[:, q:])
            out[:, q + 1 :] |= src[:, :-1] >> hi
    return out


def _disk_filter(bits: np.ndarray, se: StructuringElement, erode_mode: bool) -> np.ndarray:
    """Disk erosion/dilation of a whole array, background outside.

    Rows are bit-packed into 64-bit words with an ``r``-pixel zero margin on
    every side. The disk is decomposed into horizontal runs; a run of length L
    is the AND/OR of two overlapping power-of-two windows, which are built by
    doubling. The disk is then the AND/OR of its shifted rows.
    """
    op = np.bitwise_and if erode_mode else np.bitwise_or
    r = se.radius_px
    h, w = bits.shape
    packed = np.zeros((h + 2 * r, -(-(w + 2 * r) // 64) * 8), dtype=np.uint8)
    packed[r : r + h, : -(-w // 8)] = np.packbits(bits, axis=1, bitorder="little")
    words = _shift_words(packed.view("<u8"), -r)
    half_widths = se.row_half_widths()
    longest = 2 * max(hw for _, hw in half_widths) + 1
    # windows[k] bit c combines columns c .. c+k-1
    windows = {1: words}
    k = 1
    while 2 * k <= longest:
        prev = windows[k]
        windows[2 * k] = op(prev, _shift_words(prev, k))
        k *= 2
    runs: dict[int, np.ndarray] = {}
    out = None
    for dy, hw in half_widths:
        run = runs.get(hw)
        if run is None:
            length = 2 * hw + 1
            m = 1 << (length.bit_length() - 1)
            run = _shift_words(windows[m], -hw)
            if m != length:
                run = op(run, _shift_words(windows[m], length - m - hw))
            runs[hw] = run
        rows = run[r + dy : r + dy + h]
        if out is None:
            out = rows.copy()
        else:
            op(out, rows, out=out)
    out = np.ascontiguousarray(_shift_words(out, r))
    return np.unpackbits(out.view(np.uint8), axis=1, count=w, bitorder="little").view(bool)


def erode_bits(bits: np.ndarray, se: StructuringElement) -> np.ndarray:
    if se.radius_px == 0:
        return bits.copy()
    box = _bbox(bits)
    if box is None:
        return np.zeros_like(bits, dtype=bool)
    y0, y1, x0, x1 = box
    if (y1 - y0, x1 - x0) == bits.shape:
        return _disk_filter(bits, se, erode_mode=True)
    out = np.zeros_like(bits, dtype=bool)
    out[y0:y1, x0:x1] = _disk_filter(bits[y0:y1, x0:x1], se, erode_mode=True)
    return out


def dilate_bits(bits: np.ndarray, se: StructuringElement) -> np.ndarray:
    if se.radius_px == 0:
        return bits.copy()
    box = _bbox(bits)
    if box is None:
        return np.zeros_like(bits, dtype=bool)
    r = se.radius_px
    h, w = bits.shape
    y0, y1, x0, x1 = box
    y0, x0 = max(y0 - r, 0), max(x0 - r, 0)
    y1, x1 = min(y1 + r, h), min(x1 + r, w)
    if (y1 - y0, x1 - x0) == bits.shape:
        return _disk_filter(bits, se, erode_mode=False)
    out = np.zeros_like(bits, dtype=bool)
    out[y0:y1, x0:x1] = _disk_filter(bits[y0:y1, x0:x1], se, erode_mode=False)
    return out


def erode(s: BinaryRaster, f: StructuringElement) -> BinaryRaster:
    """Pixels where the whole disk, centered there, lies on foreground."""
    return s.like(erode_bits(s.bits, f))


def dilate(s: BinaryRaster, f: StructuringElement) -> BinaryRaster:
    """Pixels whose centered disk touches foreground. Clipped at the raster edge."""
    return s.like(dilate_bits(s.bits, f))


def opening(s: BinaryRaster, f: StructuringElement) -> BinaryRaster:
    """Erosion followed by dilation; the conventional as-printed slice."""
    return s.like(dilate_bits(erode_bits(s.bits, f), f))


def neighborhood(s: BinaryRaster, p: tuple[int, int]) -> Neighborhood:
    x, y = p
    if not (0 <= x < s.width and 0 <= y < s.height):
        raise IndexError(f"pixel {p} outside {s.width}x{s.height} raster")
    vals = []
    for dx, dy in NEIGHBOR_OFFSETS:
        qx, qy = x + dx, y + dy
        inside = 0 <= qx < s.width and 0 <= qy < s.height
        vals.append(int(inside and s.bits[qy, qx]))
    return Neighborhood(tuple(vals))


def neighborhood_codes(bits: np.ndarray) -> np.ndarray:
    """8-bit neighbor code per pixel; bit k-1 holds x_k."""
    h, w = bits.shape
    padded = np.pad(bits, 1).view(np.uint8)
    code = np.zeros((h, w), dtype=np.uint8)
    for k, (dx, dy) in enumerate(NEIGHBOR_OFFSETS):
        code |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] << k
    return code


def neighbor_counts(bits: np.ndarray) -> np.ndarray:
    h, w = bits.shape
    padded = np.pad(bits, 1).view(np.uint8)
    count = np.zeros((h, w), dtype=np.uint8)
    for dx, dy in NEIGHBOR_OFFSETS:
        count += padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return count


def symmetric_diff_counts(a: BinaryRaster, b: BinaryRaster) -> tuple[int, int]:
    """(added, removed) going from ``a`` to ``b``."""
    a.check_comparable(b)
    added = int(np.count_nonzero(b.bits & ~a.bits))
    removed = int(np.count_nonzero(a.bits & ~b.bits))
    return added, removed


def label_bits(bits: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    if connectivity == 8:
        structure = _EIGHT
    elif connectivity == 4:
        structure = _FOUR
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(bits, structure=structure)
    return labels, int(count)


def connected_components(s: BinaryRaster, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label map (0 = background) and component count.

    Labels are numbered by first pixel in row-major scan order.
    """
    return label_bits(s.bits, connectivity)


def count_holes(bits: np.ndarray) -> int:
    """Bounded 4-connected background components."""
    _, n = label_bits(~np.pad(bits, 1), 4)
    return n - 1


def euler_bits(bits: np.ndarray) -> int:
    return label_bits(bits, 8)[1] - count_holes(bits)


def euler_number(s: BinaryRaster) -> int:
    """8-connected foreground components minus 4-connected holes."""
    return euler_bits(s.bits)


def to_image_rows(s: BinaryRaster) -> np.ndarray:
    """uint8 image with the highest y row first, foreground 255."""
    return np.ascontiguousarray(s.bits[::-1].astype(np.uint8) * 255)


def write_pgm(s: BinaryRaster, path) -> None:
    """Binary PGM: ``P5\\n<w> <h>\\n255\\n`` then rows from max y down to y=0."""
    header = f"P5\n{s.width} {s.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_image_rows(s).tobytes())


def read_pgm(path, pitch: float = 1.0, origin=(0.0, 0.0)) -> BinaryRaster:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pixels = np.frombuffer(data[len(data) - w * h :], dtype=np.uint8).reshape(h, w)
    return BinaryRaster(pixels[::-1] > maxval // 2, pitch, origin)


def write_png(s: BinaryRaster, path) -> None:
    from PIL import Image

    Image.fromarray(to_image_rows(s), mode="L").save(path)
