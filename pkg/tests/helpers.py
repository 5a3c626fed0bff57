"""Raster builders shared by the tests."""

import numpy as np
from scipy import ndimage


def raster_from_art(art: str) -> np.ndarray:
    """Parse '#'/'.' art; the first text line is the top (highest y) row."""
    rows = [line.strip() for line in art.strip().splitlines()]
    return np.array([[c == "#" for c in row] for row in rows[::-1]], dtype=bool)


def random_bits(rng, shape, density=0.5) -> np.ndarray:
    return rng.random(shape) < density


def blobby_bits(rng, shape, density=0.55, smooth=1) -> np.ndarray:
    """Random rasters with some spatial coherence: noise then a 3x3 majority vote."""
    bits = rng.random(shape) < density
    for _ in range(smooth):
        bits = ndimage.uniform_filter(bits.astype(float), 3, mode="constant") > 0.5
    return bits
