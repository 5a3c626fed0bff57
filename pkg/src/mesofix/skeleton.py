"""Topology-preserving thinning and meso-skeleton construction.

Thinning is the two-subiteration parallel scheme of Guo and Hall, written in
terms of neighbors ``x1..x8`` numbered counter-clockwise from east. A pixel
is deleted in a subiteration when

* (a) the crossing number ``X_H`` is 1,
* (b) ``2 <= min(n1, n2) <= 3``,
* (c) ``(x2 | x3 | ~x8) & x1 == 0`` in subiteration 1, or
  ``(x6 | x7 | ~x4) & x5 == 0`` in subiteration 2.

Decisions inside a subiteration are taken on the unmodified raster, then all
marked pixels are removed together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mesofix.raster import (
    NEIGHBOR_OFFSETS,
    BinaryRaster,
    Neighborhood,
    StructuringElement,
    erode_bits,
    neighbor_counts,
    neighborhood_codes,
    write_pgm,
)

log = logging.getLogger(__name__)

ANCHOR_MODES = ("protect", "union")


@dataclass(frozen=True)
class ThinningDecision:
    delete: bool
    reason: str


@dataclass(frozen=True)
class MesoSkeletonResult:
    skeleton: BinaryRaster
    erosion: BinaryRaster
    iterations: int
    converged: bool


def crossing_number(n: Neighborhood) -> int:
    """Hilditch crossing number: edge neighbor off, followed by an on pixel."""
    return sum(1 for i in range(1, 5) if n[2 * i - 1] == 0 and (n[2 * i] or n[2 * i + 1]))


def _n1(n: Neighborhood) -> int:
    return sum(1 for k in range(1, 5) if n[2 * k - 1] or n[2 * k])


def _n2(n: Neighborhood) -> int:
    return sum(1 for k in range(1, 5) if n[2 * k] or n[2 * k + 1])


def deletable(n: Neighborhood, subiteration: int) -> ThinningDecision:
    if subiteration not in (1, 2):
        raise ValueError(f"subiteration must be 1 or 2, got {subiteration}")
    if crossing_number(n) != 1:
        return ThinningDecision(False, "a")
    if not 2 <= min(_n1(n), _n2(n)) <= 3:
        return ThinningDecision(False, "b")
    if subiteration == 1:
        if (n[2] or n[3] or not n[8]) and n[1]:
            return ThinningDecision(False, "c1")
        return ThinningDecision(True, "a,b,c1")
    if (n[6] or n[7] or not n[4]) and n[5]:
        return ThinningDecision(False, "c2")
    return ThinningDecision(True, "a,b,c2")


def _build_tables() -> tuple[np.ndarray, np.ndarray]:
    tables = []
    for sub in (1, 2):
        table = np.zeros(256, dtype=bool)
        for code in range(256):
            table[code] = deletable(Neighborhood.from_code(code), sub).delete
        table.setflags(write=False)
        tables.append(table)
    return tables[0], tables[1]


DELETE_TABLES = _build_tables()


def _thin_pass_bits(bits: np.ndarray, protect: np.ndarray | None = None) -> np.ndarray:
    out = bits.copy()
    for table in DELETE_TABLES:
        marked = table[neighborhood_codes(out)] & out
        if protect is not None:
            marked &= ~protect
        out &= ~marked
    return out


def thin_pass(s: BinaryRaster) -> BinaryRaster:
    """One full thinning iteration (both subiterations)."""
    return s.like(_thin_pass_bits(s.bits))


def spur_pixels(s: BinaryRaster) -> BinaryRaster:
    """Foreground pixels with at most one foreground 8-neighbor."""
    return s.like(s.bits & (neighbor_counts(s.bits) <= 1))


def _removable_spurs(bits: np.ndarray) -> np.ndarray:
    """Endpoints whose deletion cannot change topology.

    Isolated pixels are kept, and so are both pixels of a two-pixel
    component, since removing either would delete a component.
    """
    counts = neighbor_counts(bits)
    ends = bits & (counts == 1)
    return ends & (neighbor_counts(ends) == 0)


def _crop_box(bits: np.ndarray, margin: int) -> tuple[slice, slice] | None:
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(bits.any(axis=0))
    h, w = bits.shape
    return (
        slice(max(rows[0] - margin, 0), min(rows[-1] + 1 + margin, h)),
        slice(max(cols[0] - margin, 0), min(cols[-1] + 1 + margin, w)),
    )


def meso_skeleton(
    s: BinaryRaster,
    f: StructuringElement,
    *,
    spur_removal: bool = True,
    anchor: str = "protect",
    max_iterations: int | None = None,
    snapshot_dir=None,
) -> MesoSkeletonResult:
    """Thin ``s`` down to its erosion by ``f`` plus skeletal paths.

    The erosion acts as a floor for thinning. With ``anchor="protect"``,
    erosion pixels are never marked for deletion; ``anchor="union"`` deletes
    them and ORs the erosion back after each iteration. Spur pixels are
    stripped during the first ``f.radius_px`` iterations so that dilation
    restores protrusions to their designed length.
    """
    if anchor not in ANCHOR_MODES:
        raise ValueError(f"anchor must be one of {ANCHOR_MODES}, got {anchor!r}")
    erosion_full = erode_bits(s.bits, f)
    skel_full = np.zeros_like(s.bits)
    box = _crop_box(s.bits, 1)
    if box is None:
        empty = s.like(skel_full)
        return MesoSkeletonResult(empty, empty, 1, True)

    src = s.bits[box]
    floor = erosion_full[box]
    if max_iterations is None:
        max_iterations = 2 * max(src.shape) + 4
    snap = Path(snapshot_dir) if snapshot_dir is not None else None
    if snap is not None:
        snap.mkdir(parents=True, exist_ok=True)

    current = src.copy()
    j = 0
    converged = False
    while j < max_iterations:
        prev = current
        if anchor == "protect":
            current = _thin_pass_bits(current, protect=floor)
        else:
            current = _thin_pass_bits(current)
        if j < f.radius_px and spur_removal:
            current = current & ~(_removable_spurs(current) & ~floor)
        current = current | floor
        j += 1
        if snap is not None:
            skel_full[box] = current
            write_pgm(s.like(skel_full), snap / f"iter_{j:04d}.pgm")
        if np.array_equal(current, prev):
            converged = True
            break
    if not converged:
        log.warning("meso-skeleton did not converge after %d iterations", j)

    skel_full[box] = current
    return MesoSkeletonResult(s.like(skel_full), s.like(erosion_full), j, converged)


_FOUR_OFFSETS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def deletion_times(bits: np.ndarray) -> tuple[np.ndarray, int]:
    """Run thinning to convergence, tracking when each pixel goes.

    Returns ``(times, passes)`` where ``times`` is 0 for background, ``k``
    for pixels removed during pass ``k`` and -1 for pixels that survive.
    Only contour pixels can satisfy condition (a), so each subiteration
    inspects just the current contour.
    """
    h, w = bits.shape
    W = w + 2
    grid = np.pad(bits, 1).ravel().copy()
    times = np.where(grid, -1, 0).astype(np.int32)
    if not grid.any():
        return times.reshape(h + 2, W)[1:-1, 1:-1].copy(), 0

    nbr = np.array([dx + dy * W for dx, dy in NEIGHBOR_OFFSETS], dtype=np.int64)
    four = np.array([dx + dy * W for dx, dy in _FOUR_OFFSETS], dtype=np.int64)
    weights = (1 << np.arange(8)).astype(np.uint8)

    fg = np.flatnonzero(grid)
    has_bg = (~grid[fg[:, None] + four[None, :]]).any(axis=1)
    contour = fg[has_bg]

    passes = 0
    k = 0
    while True:
        k += 1
        removed_any = False
        for table in DELETE_TABLES:
            if contour.size == 0:
                break
            codes = (grid[contour[:, None] + nbr[None, :]].astype(np.uint8) * weights).sum(
                axis=1, dtype=np.uint8
            )
            gone = contour[table[codes]]
            if gone.size == 0:
                continue
            removed_any = True
            grid[gone] = False
            times[gone] = k
            exposed = (gone[:, None] + four[None, :]).ravel()
            exposed = exposed[grid[exposed]]
            keep = contour[grid[contour]]
            contour = np.unique(np.concatenate([keep, exposed]))
        if not removed_any:
            break
        passes = k
    return times.reshape(h + 2, W)[1:-1, 1:-1].copy(), passes


def thin_to_convergence(s: BinaryRaster) -> tuple[BinaryRaster, int]:
    """Unbounded thinning; returns the skeleton and the number of passes that removed pixels."""
    times, passes = deletion_times(s.bits)
    return s.like(times == -1), passes


def max_element_diameter(s: BinaryRaster, mode: str = "local") -> int | None:
    """Largest disk diameter (px) that prints the slice without correction.

    Counts contour layers peeled by plain thinning before the skeleton first
    shows up as a one-pixel-wide line. In ``"local"`` mode that is the first
    pass exposing a surviving skeleton pixel to the background, so a thin
    membrane bounds the answer even next to a bulky region. ``"global"``
    waits until the whole slice has converged. Returns ``None`` for an
    empty slice (no bound).
    """
    if mode not in ("local", "global"):
        raise ValueError(f"mode must be 'local' or 'global', got {mode!r}")
    box = _crop_box(s.bits, 1)
    if box is None:
        return None
    times, passes = deletion_times(s.bits[box])
    if mode == "global":
        return 2 * passes
    survivors = times == -1
    # a pixel outside the crop is background, i.e. time 0
    padded = np.pad(times, 1, constant_values=0)
    h, w = times.shape
    exposure = np.full(times.shape, np.iinfo(np.int32).max, dtype=np.int64)
    for dx, dy in _FOUR_OFFSETS:
        t = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w].astype(np.int64)
        t[t == -1] = np.iinfo(np.int32).max
        exposure = np.minimum(exposure, t)
    return 2 * int(exposure[survivors].min())
